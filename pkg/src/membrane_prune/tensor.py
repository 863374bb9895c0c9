"""
Dense tensor primitives with analytic gradients.

Every function here takes and returns plain ``numpy.float64`` arrays in
the canonical layouts:

    activations      B x C x H x W
    conv kernels     M x C x k x k
    affine weights   U x D

Convolution is valid (no padding) cross-correlation with stride 1.
Max-pooling uses ceiling output rounding: windows that overhang the
bottom/right edge are truncated to the valid pixels. That rounding is what
lets a 2x2 map go through a 3x3/stride-2 pool and come out 1x1, which the
32x32 patch architecture depends on.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericError, ShapeError

DTYPE = np.float64


def as_tensor(values, ndim=None, name="tensor"):
    """Convert ``values`` to a float64 array and validate it."""
    arr = np.asarray(values, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if any(extent < 1 for extent in arr.shape):
        raise ShapeError(f"{name} has an empty extent: shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {name}")
    return arr


# ----------------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------------

def _check_conv(x, kernels, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be B x C x H x W, got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv kernels must be M x C x k x k, got {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input has {x.shape[1]}, kernels expect {kernels.shape[1]}"
        )
    k = kernels.shape[2]
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"kernel size {k} exceeds input extents {x.shape[2:]}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv bias must have shape ({kernels.shape[0]},), got {bias.shape}")


def conv2d_forward(x, kernels, bias):
    """Valid stride-1 cross-correlation.

    ``out[b, m, y, x] = bias[m] + sum_{c, dy, dx} x[b, c, y+dy, x+dx] * kernels[m, c, dy, dx]``
    """
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    _check_conv(x, kernels, bias)
    check_finite(x, "conv input")
    k = kernels.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,M
    out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernels, need_input=True):
    """Gradients of a scalar loss w.r.t. input, kernels and bias of a conv.

    With ``need_input=False`` the (costly) input gradient is skipped and
    returned as ``None``; used for the first layer.
    """
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    _check_conv(x, kernels, np.zeros(kernels.shape[0]))
    k = kernels.shape[2]
    B, C, H, W = x.shape
    M = kernels.shape[0]
    expected = (B, M, H - k + 1, W - k + 1)
    if grad_out.shape != expected:
        raise ShapeError(f"conv grad_out must have shape {expected}, got {grad_out.shape}")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    grad_kernels = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))  # M,C,k,k

    if not need_input:
        return None, grad_kernels, grad_bias

    # full correlation of the upstream gradient with the flipped kernels
    padded = np.pad(grad_out, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gwin = sliding_window_view(padded, (k, k), axis=(2, 3))  # B,M,H,W,k,k
    flipped = kernels[:, :, ::-1, ::-1]
    grad_input = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # B,H,W,C
    grad_input = np.ascontiguousarray(grad_input.transpose(0, 3, 1, 2))
    return grad_input, grad_kernels, grad_bias


# ----------------------------------------------------------------------------
# Max pooling
# ----------------------------------------------------------------------------

def pool_extent(size, k, stride):
    """Ceil-mode output extent of a pooling window sweep."""
    return max(1, math.ceil((size - k) / stride) + 1)


class PoolIndices:
    """Argmax bookkeeping from :func:`maxpool_forward`.

    ``flat`` holds, per output cell, the row-major position ``y * W + x`` of
    the winning input pixel inside its ``H x W`` plane.
    """

    __slots__ = ("flat", "input_shape")

    def __init__(self, flat, input_shape):
        self.flat = flat
        self.input_shape = tuple(input_shape)


def maxpool_forward(x, k, stride):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"pool input must be B x C x H x W, got {x.shape}")
    if k < 1 or stride < 1:
        raise InputError("pool kernel and stride must be positive")
    check_finite(x, "pool input")
    B, C, H, W = x.shape
    Ho, Wo = pool_extent(H, k, stride), pool_extent(W, k, stride)
    Hp, Wp = (Ho - 1) * stride + k, (Wo - 1) * stride + k
    if (Hp, Wp) != (H, W):
        padded = np.full((B, C, max(Hp, H), max(Wp, W)), -np.inf)
        padded[:, :, :H, :W] = x
    else:
        padded = x
    # sweep window offsets in row-major order; strict '>' keeps the first maximum
    out = padded[:, :, 0:Hp:stride, 0:Wp:stride][:, :, :Ho, :Wo].copy()
    local = np.zeros(out.shape, np.intp)
    for offset in range(1, k * k):
        dy, dx = divmod(offset, k)
        v = padded[:, :, dy:dy + Hp - k + 1:stride, dx:dx + Wp - k + 1:stride]
        better = v > out
        np.copyto(out, v, where=better)
        np.copyto(local, offset, where=better)

    dy, dx = np.divmod(local, k)
    rows = np.arange(Ho)[:, None] * stride + dy
    cols = np.arange(Wo)[None, :] * stride + dx
    return out, PoolIndices(rows * W + cols, x.shape)


def maxpool_backward(grad_out, indices):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != indices.flat.shape:
        raise ShapeError(
            f"pool grad_out shape {grad_out.shape} does not match recorded indices {indices.flat.shape}"
        )
    B, C, H, W = indices.input_shape
    plane = H * W
    offsets = (np.arange(B * C) * plane).reshape(B, C, 1, 1)
    grad = np.bincount(
        (indices.flat + offsets).ravel(), weights=grad_out.ravel(), minlength=B * C * plane
    )
    return grad.reshape(B, C, H, W)


# ----------------------------------------------------------------------------
# Affine
# ----------------------------------------------------------------------------

def _check_affine(x, weights, bias):
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"affine expects B x D input and U x D weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"affine inner extent mismatch: {x.shape[1]} vs {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"affine bias must have shape ({weights.shape[0]},), got {bias.shape}")


def affine_forward(x, weights, bias):
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    _check_affine(x, weights, bias)
    check_finite(x, "affine input")
    return x @ weights.T + bias


def affine_backward(grad_out, x, weights):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    _check_affine(x, weights, np.zeros(weights.shape[0]))
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"affine grad_out has shape {grad_out.shape}")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


# ----------------------------------------------------------------------------
# Nonlinearity and loss
# ----------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels.

    Returns ``(loss, grad_logits)`` where the gradient already carries the
    ``1/B`` factor of the batch mean.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be B x K with B >= 1, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels must have shape ({logits.shape[0]},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise InputError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InputError(f"label outside [0, {logits.shape[1] - 1}]")
    check_finite(logits, "logits")

    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= B
    return loss, grad
