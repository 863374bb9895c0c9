"""
The 8-layer membrane patch classifier and its structural edits.

Layer pipeline::

    c1 conv7 -> relu -> p1 pool3/2
    c2 conv5 -> relu -> p2 pool3/2
    c3 conv3 -> relu -> p3 pool3/2
    fc4 affine -> relu
    fc5 affine -> softmax (2 classes)

Each prunable layer (c1, c2, c3, fc4) carries a boolean keep-mask over its
output maps. Masking a map zeroes its kernel slice and bias; the forward
pass then skips the map entirely, together with the matching input slice
of the next layer, so a masked network computes the same function as its
physically shrunk counterpart.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, InputError, NumericError, ShapeError, StructuralError

PRUNABLE = ("c1", "c2", "c3", "fc4")
LAYERS = ("c1", "c2", "c3", "fc4", "fc5")
N_CLASSES = 2

#: Output maps kept per prunable layer (c1, c2, c3, fc4) for each network.
NAMED_CONFIGS = {
    "N": (100, 75, 50, 200),
    "N1": (90, 75, 40, 150),
    "N2": (65, 75, 40, 150),
    "N3": (90, 60, 40, 150),
    "N4": (90, 75, 30, 150),
    "N5": (90, 75, 40, 110),
    "N6": (65, 60, 30, 110),
    "N7": (30, 20, 10, 10),
}


@dataclass(frozen=True)
class NetworkConfig:
    map_counts: tuple
    patch_size: int = 32
    kernel_sizes: tuple = (7, 5, 3)
    pool_kernel: int = 3
    pool_stride: int = 2

    def __post_init__(self):
        counts = tuple(int(c) for c in self.map_counts)
        object.__setattr__(self, "map_counts", counts)
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if len(counts) != len(PRUNABLE):
            raise InputError(f"expected {len(PRUNABLE)} map counts, got {len(counts)}")
        if min(counts) < 1:
            raise InputError(f"every map count must be >= 1, got {counts}")
        self.spatial_extents()  # validates geometry

    @classmethod
    def named(cls, name, **kwargs):
        try:
            return cls(NAMED_CONFIGS[name], **kwargs)
        except KeyError:
            raise InputError(f"unknown network name {name!r}; known: {', '.join(NAMED_CONFIGS)}") from None

    def spatial_extents(self):
        """Side length after each conv and each pool: [c1, p1, c2, p2, c3, p3]."""
        size = self.patch_size
        out = []
        for k in self.kernel_sizes:
            if size < k:
                raise ShapeError(f"patch size {self.patch_size} too small for the conv chain")
            size = size - k + 1
            out.append(size)
            size = T.pool_extent(size, self.pool_kernel, self.pool_stride)
            out.append(size)
        return out

    @property
    def flat_block(self):
        """Number of fc4 inputs contributed by one c3 map."""
        return self.spatial_extents()[-1] ** 2

    def to_dict(self):
        return {
            "map_counts": list(self.map_counts),
            "patch_size": self.patch_size,
            "kernel_sizes": list(self.kernel_sizes),
            "pool_kernel": self.pool_kernel,
            "pool_stride": self.pool_stride,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["map_counts"]),
            patch_size=d["patch_size"],
            kernel_sizes=tuple(d["kernel_sizes"]),
            pool_kernel=d["pool_kernel"],
            pool_stride=d["pool_stride"],
        )


def param_shapes(config):
    """Ordered ``name -> shape`` map of every parameter tensor."""
    c1, c2, c3, f4 = config.map_counts
    k1, k2, k3 = config.kernel_sizes
    return {
        "c1.w": (c1, 1, k1, k1),
        "c1.b": (c1,),
        "c2.w": (c2, c1, k2, k2),
        "c2.b": (c2,),
        "c3.w": (c3, c2, k3, k3),
        "c3.b": (c3,),
        "fc4.w": (f4, c3 * config.flat_block),
        "fc4.b": (f4,),
        "fc5.w": (N_CLASSES, f4),
        "fc5.b": (N_CLASSES,),
    }


class Network:
    """Parameters, masks and forward/backward passes of one classifier."""

    def __init__(self, config, params, masks=None, meta=None):
        self.config = config
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            raise ShapeError(f"parameter names {sorted(params)} do not match {sorted(shapes)}")
        self.params = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=T.DTYPE)
            if arr.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
            self.params[name] = arr
        self.masks = {}
        for layer, count in zip(PRUNABLE, config.map_counts):
            mask = np.ones(count, bool) if masks is None else np.array(masks[layer], bool)
            if mask.shape != (count,):
                raise ShapeError(f"mask of {layer} must have length {count}, got {mask.shape}")
            self.masks[layer] = mask
        self.meta = dict(meta or {})

    # -- structure --------------------------------------------------------

    def copy(self):
        return Network(self.config, self.params, self.masks, self.meta)

    def map_count(self, layer):
        return self.config.map_counts[PRUNABLE.index(layer)]

    def set_mask(self, layer, mask):
        """Replace a layer's keep-mask and zero the parameters of dropped maps."""
        mask = np.asarray(mask, bool)
        if mask.shape != (self.map_count(layer),):
            raise ShapeError(f"mask of {layer} must have length {self.map_count(layer)}")
        self.masks[layer] = mask.copy()
        self.params[f"{layer}.w"][~mask] = 0.0
        self.params[f"{layer}.b"][~mask] = 0.0

    def discard(self, layer, features):
        mask = self.masks[layer].copy()
        mask[list(features)] = False
        self.set_mask(layer, mask)

    def is_masked(self):
        return not all(m.all() for m in self.masks.values())

    def parameter_mask(self, name):
        """Boolean array marking which entries of ``params[name]`` are live.

        An entry is dead when its own map is masked or, for weights, when the
        upstream map it reads from is masked.
        """
        layer, kind = name.split(".")
        live = np.ones(self.params[name].shape, bool)
        if layer in self.masks:
            live[~self.masks[layer]] = False
        idx = LAYERS.index(layer)
        if kind == "w" and idx > 0:
            in_sel = self._input_selection(idx, self.masks)
            if not isinstance(in_sel, slice):
                cols = np.zeros(live.shape[1], bool)
                cols[in_sel] = True
                live[:, ~cols] = False
        return live

    # -- forward / backward -----------------------------------------------

    def _keep(self, layer, masks):
        m = masks[layer]
        return slice(None) if m.all() else np.flatnonzero(m)

    def _input_selection(self, idx, masks):
        """Columns/channels of layer ``idx``'s weights that see live inputs."""
        if idx == 0:
            return slice(None)
        upstream = self._keep(LAYERS[idx - 1], masks)
        if LAYERS[idx] == "fc4" and not isinstance(upstream, slice):
            block = self.config.flat_block
            return (upstream[:, None] * block + np.arange(block)).ravel()
        return upstream

    def _layer(self, idx, a, masks, record=False):
        """One stage: weights see only live inputs; all output maps are
        computed, then the kept ones are selected. Relu and pooling act per
        channel, so selecting before or after them gives identical bits."""
        layer = LAYERS[idx]
        in_sel = self._input_selection(idx, masks)
        w = self.params[f"{layer}.w"]
        if not isinstance(in_sel, slice):
            w = w[:, in_sel]
        b = self.params[f"{layer}.b"]
        out_sel = self._keep(layer, masks) if layer in masks else slice(None)
        if idx < 3:
            z = T.conv2d_forward(a, w, b)
            zk = z[:, out_sel]
            out, pidx = T.maxpool_forward(
                T.relu_forward(zk), self.config.pool_kernel, self.config.pool_stride
            )
            cache = (a, w, zk, pidx, out_sel, in_sel, z.shape)
        elif idx == 3:
            flat = a.reshape(a.shape[0], -1)
            z = T.affine_forward(flat, w, b)
            zk = z[:, out_sel]
            out = T.relu_forward(zk)
            cache = (flat, w, zk, a.shape, out_sel, in_sel, z.shape)
        else:
            out = T.affine_forward(a, w, b)
            cache = (a, w, None, None, out_sel, in_sel, out.shape)
        return out, (cache if record else None)

    def _propagate(self, a, start, stop, masks, record=False):
        caches = []
        for idx in range(start, stop):
            a, cache = self._layer(idx, a, masks, record)
            caches.append(cache)
        return a, caches

    def layer_outputs(self, layer, a, masks=None):
        """Output of ``layer`` for every one of its maps (no output mask).

        Selecting kept channels from this array reproduces the masked
        forward bit for bit; the greedy search caches it.
        """
        masks = self.resolve_masks(masks)
        full = dict(masks)
        full[layer] = np.ones_like(masks[layer])
        return self._layer(LAYERS.index(layer), a, full)[0]

    def _check_input(self, x):
        x = np.asarray(x, dtype=T.DTYPE)
        n = self.config.patch_size
        if x.ndim != 4 or x.shape[1:] != (1, n, n):
            raise ShapeError(f"patches must be B x 1 x {n} x {n}, got {x.shape}")
        return x

    def resolve_masks(self, masks):
        if masks is None:
            return self.masks
        merged = dict(self.masks)
        merged.update(masks)
        return merged

    def activations_before(self, layer, x, masks=None):
        """Input of ``layer`` (compact: masked upstream maps omitted)."""
        x = self._check_input(x)
        return self._propagate(x, 0, LAYERS.index(layer), self.resolve_masks(masks))[0]

    def logits_from(self, layer, a, masks=None):
        """Run the pipeline from ``layer`` onward on a cached input."""
        return self._propagate(a, LAYERS.index(layer), len(LAYERS), self.resolve_masks(masks))[0]

    def logits_after(self, layer, out, masks=None):
        """Run the layers following ``layer`` on its (kept-map) output."""
        idx = LAYERS.index(layer) + 1
        return self._propagate(out, idx, len(LAYERS), self.resolve_masks(masks))[0]

    def logits(self, x, masks=None):
        x = self._check_input(x)
        return self._propagate(x, 0, len(LAYERS), self.resolve_masks(masks))[0]

    def forward(self, x, masks=None, chunk=512):
        """Class probabilities, shape B x 2."""
        x = self._check_input(x)
        parts = [T.softmax(self.logits(x[i:i + chunk], masks)) for i in range(0, len(x), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, N_CLASSES))

    def loss_and_gradients(self, x, labels):
        """Mean cross-entropy and full-shape parameter gradients.

        Gradients of masked parameters are exactly zero.
        """
        x = self._check_input(x)
        logits, caches = self._propagate(x, 0, len(LAYERS), self.masks, record=True)
        loss, g = T.softmax_xent(logits, labels)
        grads = {}
        for idx in reversed(range(len(LAYERS))):
            layer = LAYERS[idx]
            a, w, zk, extra, out_sel, in_sel, full_shape = caches[idx]
            if idx < 4:
                if idx < 3:
                    g = T.maxpool_backward(g, extra)
                g = T.relu_backward(g, zk)
                if not isinstance(out_sel, slice):
                    full = np.zeros(full_shape)
                    full[:, out_sel] = g
                    g = full
            if idx == 4 or idx == 3:
                g, gw, gb = T.affine_backward(g, a, w)
                if idx == 3:
                    g = g.reshape(extra)
            else:
                g, gw, gb = T.conv2d_backward(g, a, w, need_input=idx > 0)
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NumericError(f"non-finite gradient in layer {layer}")
            grads[f"{layer}.b"] = gb
            grads[f"{layer}.w"] = _scatter_columns(gw, self.params[f"{layer}.w"].shape, in_sel)
        return loss, grads


def _scatter_columns(grad, shape, in_sel):
    if isinstance(in_sel, slice):
        return grad
    full = np.zeros(shape)
    full[:, in_sel] = grad
    return full


# ----------------------------------------------------------------------------
# Construction, loss, shrinking
# ----------------------------------------------------------------------------

def build(config, seed=0):
    """Fresh network: N(0, 1/fan_in) weights, zero biases, all maps kept."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return Network(config, params, meta={"init": "normal(0, 1/sqrt(fan_in))", "seed": int(seed)})


def loss(net, batches, masks=None):
    """Mean data loss over a list of ``(patches, labels)`` batches."""
    batches = list(batches)
    if not batches:
        raise InputError("loss needs at least one batch")
    return float(np.mean([T.softmax_xent(net.logits(x, masks), y)[0] for x, y in batches]))


def l2_penalty(net):
    return float(sum(np.sum(p * p) for p in net.params.values()))


def shrink(net):
    """Physically remove masked maps and their downstream fan-in."""
    keeps = {}
    for layer in PRUNABLE:
        idx = np.flatnonzero(net.masks[layer])
        if idx.size == 0:
            raise StructuralError(f"layer {layer} has no kept maps")
        keeps[layer] = idx
    config = NetworkConfig(
        tuple(len(keeps[layer]) for layer in PRUNABLE),
        patch_size=net.config.patch_size,
        kernel_sizes=net.config.kernel_sizes,
        pool_kernel=net.config.pool_kernel,
        pool_stride=net.config.pool_stride,
    )
    block = net.config.flat_block
    fc4_cols = (keeps["c3"][:, None] * block + np.arange(block)).ravel()
    p = net.params
    params = {
        "c1.w": p["c1.w"][keeps["c1"]],
        "c1.b": p["c1.b"][keeps["c1"]],
        "c2.w": p["c2.w"][keeps["c2"]][:, keeps["c1"]],
        "c2.b": p["c2.b"][keeps["c2"]],
        "c3.w": p["c3.w"][keeps["c3"]][:, keeps["c2"]],
        "c3.b": p["c3.b"][keeps["c3"]],
        "fc4.w": p["fc4.w"][keeps["fc4"]][:, fc4_cols],
        "fc4.b": p["fc4.b"][keeps["fc4"]],
        "fc5.w": p["fc5.w"][:, keeps["fc4"]],
        "fc5.b": p["fc5.b"],
    }
    return Network(config, params, meta=net.meta)


def count_params(net):
    """Live parameter count (kernels, affine weights and biases) per layer.

    Masked maps and their downstream fan-in are excluded, so the count of a
    masked network equals the count of its shrunk counterpart.
    """
    kept = [int(net.masks[layer].sum()) for layer in PRUNABLE]
    k1, k2, k3 = net.config.kernel_sizes
    block = net.config.flat_block
    per_layer = {
        "c1": kept[0] * k1 * k1 + kept[0],
        "c2": kept[1] * kept[0] * k2 * k2 + kept[1],
        "c3": kept[2] * kept[1] * k3 * k3 + kept[2],
        "fc4": kept[3] * kept[2] * block + kept[3],
        "fc5": N_CLASSES * kept[3] + N_CLASSES,
    }
    return sum(per_layer.values()), per_layer


# ----------------------------------------------------------------------------
# Checkpoint I/O
# ----------------------------------------------------------------------------

MAGIC = b"MPRUNECK"
VERSION = 1
_U32 = struct.Struct("<I")


def save(net, path, velocity=None):
    """Write a checkpoint.

    Layout: magic, u32 version, u32 header length, JSON header (config,
    metadata, tensor and mask manifests), little-endian float64 tensors in
    declaration order, optional optimizer velocity tensors, masks as byte
    vectors, trailing u32 CRC32 over everything before it.
    """
    names = list(param_shapes(net.config))
    vel_names = names if velocity is not None else []
    header = {
        "config": net.config.to_dict(),
        "meta": net.meta,
        "tensors": [[n, list(net.params[n].shape)] for n in names],
        "velocity": vel_names,
        "masks": [[layer, int(net.masks[layer].size)] for layer in PRUNABLE],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(head)), head]
    for n in names:
        chunks.append(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes())
    for n in vel_names:
        chunks.append(np.ascontiguousarray(velocity[n], dtype="<f8").tobytes())
    for layer in PRUNABLE:
        chunks.append(net.masks[layer].astype(np.uint8).tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + _U32.pack(zlib.crc32(body)))


def load_with_state(path):
    """Read a checkpoint; returns ``(network, velocity_or_None)``."""
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 2 * _U32.size
    if len(data) < fixed + _U32.size:
        raise FormatError("checkpoint truncated before header", offset=len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = _U32.unpack_from(data, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    (head_len,) = _U32.unpack_from(data, len(MAGIC) + _U32.size)
    pos = fixed
    if pos + head_len > len(data) - _U32.size:
        raise FormatError("checkpoint truncated inside header", offset=len(data))
    try:
        header = json.loads(data[pos:pos + head_len].decode())
        config = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=pos) from None
    pos += head_len

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data) - _U32.size:
            raise FormatError(f"checkpoint truncated in {what}", offset=pos)
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(take(8 * count, name), dtype="<f8").reshape(shape).astype(T.DTYPE)
    velocity = None
    if header["velocity"]:
        velocity = {}
        for name in header["velocity"]:
            shape = params[name].shape
            raw = take(8 * params[name].size, f"velocity {name}")
            velocity[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(T.DTYPE)
    masks = {}
    for layer, count in header["masks"]:
        masks[layer] = np.frombuffer(take(count, f"mask {layer}"), dtype=np.uint8).astype(bool)
    if pos != len(data) - _U32.size:
        raise FormatError("trailing bytes after masks", offset=pos)
    (crc,) = _U32.unpack_from(data, pos)
    if crc != zlib.crc32(data[:pos]):
        raise FormatError("checkpoint CRC mismatch", offset=pos)
    try:
        net = Network(config, params, masks, header["meta"])
    except ShapeError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from None
    return net, velocity


def load(path):
    return load_with_state(path)[0]
