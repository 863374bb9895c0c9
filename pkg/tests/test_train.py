"""SGD with momentum, weight decay and linear decay; resuming; retraining."""

import numpy as np
import pytest

from membrane_prune import net as N
from membrane_prune import train as TR
from membrane_prune.data import PatchDataset
from membrane_prune.errors import InputError, NumericError
from conftest import random_patches


def separable(count, seed):
    """Class 1 patches have a dark centre; class 0 patches do not."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.6, 1.0, size=(count, 1, 32, 32))
    y = rng.integers(0, 2, size=count)
    x[y == 1, :, 12:20, 12:20] *= 0.2
    return PatchDataset(x, y)


def test_learning_rate_decays_linearly():
    cfg = TR.TrainConfig(base_lr=0.1, iterations=10)
    assert [cfg.lr_at(i) for i in (0, 5, 10)] == pytest.approx([0.1, 0.05, 0.0])


def test_config_validation():
    with pytest.raises(InputError):
        TR.TrainConfig(base_lr=0)
    with pytest.raises(InputError):
        TR.TrainConfig(momentum=1.0)
    with pytest.raises(InputError):
        TR.TrainConfig(batch_size=0)


def test_sgd_step_follows_the_update_rule(tiny_net, tiny_data):
    cfg = TR.TrainConfig(base_lr=0.05, momentum=0.9, lam=0.01)
    batch = (tiny_data.patches[:8], tiny_data.labels[:8])
    w0 = {k: v.copy() for k, v in tiny_net.params.items()}
    velocity = {k: np.full_like(v, 0.01) for k, v in tiny_net.params.items()}
    _, grads = tiny_net.copy().loss_and_gradients(*batch)
    TR.sgd_step(tiny_net, batch, cfg, velocity)
    for k in w0:
        v = 0.9 * 0.01 - 0.05 * (grads[k] + 2 * 0.01 * w0[k])
        np.testing.assert_allclose(velocity[k], v, atol=1e-15)
        np.testing.assert_allclose(tiny_net.params[k], w0[k] + v, atol=1e-15)


def test_objective_includes_weight_decay(tiny_net, tiny_data):
    x, y = tiny_data.patches[:4], tiny_data.labels[:4]
    total, grads = TR.objective_and_gradients(tiny_net, x, y, lam=0.1)
    data_loss, data_grads = tiny_net.loss_and_gradients(x, y)
    assert total == pytest.approx(data_loss + 0.1 * N.l2_penalty(tiny_net))
    np.testing.assert_allclose(grads["c1.w"], data_grads["c1.w"] + 0.2 * tiny_net.params["c1.w"])


def test_masked_parameters_stay_zero(tiny_net, tiny_data):
    tiny_net.discard("c2", [0, 2])
    tiny_net.discard("c3", [1])
    fit = TR.fit(tiny_net, tiny_data, tiny_data, TR.TrainConfig(base_lr=0.05, batch_size=8, iterations=6))
    for name, p in fit.net.params.items():
        dead = ~fit.net.parameter_mask(name)
        assert not p[dead & (tiny_net.params[name] == 0)].any()
    assert not fit.net.params["c2.w"][[0, 2]].any()
    assert not fit.net.params["c3.b"][1]


def test_batches_cover_each_epoch_without_repeats():
    seen = np.concatenate([TR.batch_indices(20, 5, seed=3, iteration=i) for i in range(4)])
    assert sorted(seen) == list(range(20))
    np.testing.assert_array_equal(TR.batch_indices(20, 5, 3, 6), TR.batch_indices(20, 5, 3, 6))
    with pytest.raises(InputError):
        TR.batch_indices(0, 5, 0, 0)


def test_training_reduces_loss():
    train, val = separable(256, 0), separable(128, 1)
    net = N.build(N.NetworkConfig((6, 4, 3, 8)), seed=0)
    cfg = TR.TrainConfig(base_lr=0.02, batch_size=32, iterations=120, log_every=40, lam=0.0)
    fit = TR.fit(net, train, val, cfg)
    assert [h["iteration"] for h in fit.history] == [40, 80, 120]
    assert fit.history[-1]["train_loss"] < fit.history[0]["train_loss"]
    assert fit.history[-1]["val_accuracy"] > 0.9
    assert fit.net is not net and fit.iteration == 120


def test_resume_matches_uninterrupted_run(tiny_net, tiny_data, tmp_path):
    cfg = TR.TrainConfig(base_lr=0.05, batch_size=8, iterations=12, log_every=5)
    whole = TR.fit(tiny_net, tiny_data, tiny_data, cfg)
    first = TR.fit(tiny_net, tiny_data, tiny_data, cfg, stop=7)
    assert first.iteration == 7 and len(first.pending) == 2
    N.save(first.net, tmp_path / "part.ckpt", velocity=first.velocity)
    net, velocity = N.load_with_state(tmp_path / "part.ckpt")
    TR.write_history(first.history, tmp_path / "h.csv")
    state = TR.FitResult(net, TR.read_history(tmp_path / "h.csv"), velocity,
                         net.meta["iteration"], net.meta["pending_losses"])
    rest = TR.fit(net, tiny_data, tiny_data, cfg, state=state)
    for k in whole.net.params:
        np.testing.assert_array_equal(rest.net.params[k], whole.net.params[k])
    assert rest.history == whole.history


def test_callback_sees_each_history_row(tiny_net, tiny_data):
    seen = []
    TR.fit(tiny_net, tiny_data, tiny_data, TR.TrainConfig(base_lr=0.01, batch_size=8, iterations=6, log_every=2),
           callback=lambda r: seen.append(r.iteration))
    assert seen == [2, 4, 6]


def test_retrain_uses_reduced_rate_and_budget(tiny_net, tiny_data):
    cfg = TR.TrainConfig(base_lr=0.04, batch_size=8, iterations=20, log_every=100)
    fit = TR.retrain(tiny_net, tiny_data, tiny_data, cfg, lr_factor=0.5, budget_fraction=0.25)
    assert fit.iteration == 5 and fit.net.meta["base_lr"] == pytest.approx(0.02)
    same = TR.retrain(tiny_net, tiny_data, tiny_data, cfg, lr_factor=0.0)
    assert all(np.array_equal(same.net.params[k], tiny_net.params[k]) for k in tiny_net.params)


def test_divergence_raises_numeric_error(tiny_net):
    data = random_patches(16, 0)
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="iteration"):
        TR.fit(tiny_net, data, data, TR.TrainConfig(base_lr=1e300, batch_size=8, iterations=5))


def test_history_round_trip(tmp_path):
    rows = [{"iteration": 5, "train_loss": 0.1 + 1e-17, "val_accuracy": 0.75, "lr": 1 / 3}]
    TR.write_history(rows, tmp_path / "h.csv")
    assert TR.read_history(tmp_path / "h.csv") == rows
