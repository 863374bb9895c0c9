"""Network construction, masking, shrinking, gradients and checkpoints."""

import numpy as np
import pytest

from membrane_prune import net as N
from membrane_prune.errors import FormatError, InputError, ShapeError, StructuralError
from oracles import relative_error


def test_base_network_shape_chain_and_size():
    cfg = N.NetworkConfig.named("N")
    assert cfg.spatial_extents() == [26, 13, 9, 4, 2, 1]
    assert N.param_shapes(cfg)["fc4.w"] == (200, 50)
    net = N.build(cfg, seed=0)
    brute = sum(p.size for p in net.params.values())
    assert N.count_params(net)[0] == brute == 236_977


@pytest.mark.parametrize("name", list(N.NAMED_CONFIGS))
def test_masked_count_equals_shrunk_tensor_sizes(name):
    base = N.build(N.NetworkConfig.named("N"), seed=0)
    rng = np.random.default_rng(0)
    for layer, keep in zip(N.PRUNABLE, N.NAMED_CONFIGS[name]):
        drop = rng.choice(base.map_count(layer), base.map_count(layer) - keep, replace=False)
        base.discard(layer, drop)
    small = N.shrink(base)
    assert small.config.map_counts == N.NAMED_CONFIGS[name]
    assert N.count_params(base)[0] == N.count_params(small)[0] == sum(p.size for p in small.params.values())


def test_build_is_seeded(tiny_net):
    again = N.build(tiny_net.config, seed=7)
    other = N.build(tiny_net.config, seed=8)
    assert all(np.array_equal(tiny_net.params[k], again.params[k]) for k in tiny_net.params)
    assert not np.array_equal(tiny_net.params["c1.w"], other.params["c1.w"])
    assert all(not tiny_net.params[f"{layer}.b"].any() for layer in N.LAYERS)


def test_forward_gives_probabilities(tiny_net, tiny_data):
    p = tiny_net.forward(tiny_data.patches)
    assert p.shape == (len(tiny_data), 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(tiny_net.forward(tiny_data.patches, chunk=5), p, rtol=0, atol=1e-15)


def test_set_mask_zeroes_dropped_maps(tiny_net):
    tiny_net.discard("c2", [1, 3])
    assert not tiny_net.params["c2.w"][[1, 3]].any() and not tiny_net.params["c2.b"][[1, 3]].any()
    assert tiny_net.params["c2.w"][[0, 2]].any()
    assert tiny_net.is_masked()
    live = tiny_net.parameter_mask("c3.w")
    assert not live[:, [1, 3]].any() and live[:, [0, 2]].all()


@pytest.mark.parametrize("seed", range(10))
def test_masked_forward_equals_shrunk_forward(tiny_net, seed):
    rng = np.random.default_rng(seed)
    for layer in N.PRUNABLE:
        n = tiny_net.map_count(layer)
        tiny_net.discard(layer, rng.choice(n, rng.integers(0, n), replace=False))
    x = rng.uniform(size=(20, 1, 32, 32))
    np.testing.assert_allclose(tiny_net.forward(x), N.shrink(tiny_net).forward(x), rtol=0, atol=1e-12)


def test_masked_forward_equals_zeroed_dense_forward(tiny_net, tiny_data):
    """Skipping dead inputs must equal carrying explicit zero maps through."""
    tiny_net.discard("c1", [0, 4])
    tiny_net.discard("c3", [1])
    dense = N.Network(tiny_net.config, tiny_net.params)  # same zeroed weights, no masks
    np.testing.assert_allclose(tiny_net.forward(tiny_data.patches), dense.forward(tiny_data.patches),
                               atol=1e-12)


def test_shrink_rejects_empty_layer(tiny_net):
    tiny_net.discard("c3", range(3))
    with pytest.raises(StructuralError):
        N.shrink(tiny_net)


@pytest.mark.parametrize("masked", [False, True])
def test_network_gradients_match_finite_differences(tiny_net, masked):
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(4, 1, 32, 32))
    y = np.array([0, 1, 1, 0])
    if masked:
        tiny_net.discard("c1", [2])
        tiny_net.discard("c2", [0])
        tiny_net.discard("fc4", [5, 6])
    loss, grads = tiny_net.loss_and_gradients(x, y)
    assert loss == pytest.approx(N.loss(tiny_net, [(x, y)]))
    h = 1e-6
    for name, p in tiny_net.params.items():
        live = np.flatnonzero(tiny_net.parameter_mask(name))
        picks = rng.choice(live, min(12, live.size), replace=False)
        flat, numeric = p.reshape(-1), []
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = tiny_net.loss_and_gradients(x, y)[0]
            flat[i] = old - h
            down = tiny_net.loss_and_gradients(x, y)[0]
            flat[i] = old
            numeric.append((up - down) / (2 * h))
        assert relative_error(grads[name].reshape(-1)[picks], np.array(numeric)) < 1e-4, name
        if masked:
            assert not grads[name][~tiny_net.parameter_mask(name)].any()


def test_bad_input_shape_raises(tiny_net):
    with pytest.raises(ShapeError):
        tiny_net.forward(np.zeros((2, 1, 30, 30)))
    with pytest.raises(InputError):
        N.loss(tiny_net, [])
    with pytest.raises(InputError):
        N.NetworkConfig.named("N9")
    with pytest.raises(ShapeError):
        N.NetworkConfig((4, 4, 4, 4), patch_size=12)


def test_checkpoint_round_trip(tiny_net, tmp_path):
    tiny_net.discard("c2", [1])
    tiny_net.meta["note"] = "x"
    velocity = {k: np.full_like(v, 0.5) for k, v in tiny_net.params.items()}
    path = tmp_path / "a.ckpt"
    N.save(tiny_net, path, velocity=velocity)
    back, vel = N.load_with_state(path)
    assert back.config == tiny_net.config and back.meta == tiny_net.meta
    assert all(np.array_equal(back.params[k], tiny_net.params[k]) for k in tiny_net.params)
    assert all(np.array_equal(back.masks[k], tiny_net.masks[k]) for k in tiny_net.masks)
    assert all(np.array_equal(vel[k], velocity[k]) for k in velocity)
    N.save(back, tmp_path / "b.ckpt", velocity=vel)
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()
    assert N.load_with_state(tmp_path / "b.ckpt")[1] is not None
    N.save(back, tmp_path / "c.ckpt")
    assert N.load_with_state(tmp_path / "c.ckpt")[1] is None


def test_checkpoint_corruption_reports_offset(tiny_net, tmp_path):
    path = tmp_path / "a.ckpt"
    N.save(tiny_net, path)
    raw = bytearray(path.read_bytes())

    bad = bytearray(raw)
    bad[100] ^= 0xFF
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="offset"):
        N.load(path)

    path.write_bytes(bytes(raw[:-40]))
    with pytest.raises(FormatError) as info:
        N.load(path)
    assert info.value.offset is not None

    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(FormatError) as info:
        N.load(path)
    assert info.value.offset == 0
