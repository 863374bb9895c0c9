"""Independent reference implementations used as test oracles.

Everything here is written as plain loops over indices so that it shares no
code path with the vectorised library kernels.
"""

import itertools

import numpy as np


def conv2d_loops(x, kernels, bias):
    """Valid cross-correlation, stride 1, by explicit summation."""
    b, c, h, w = x.shape
    m, _, k, _ = kernels.shape
    out = np.zeros((b, m, h - k + 1, w - k + 1))
    for n, f, i, j in itertools.product(range(b), range(m), range(h - k + 1), range(w - k + 1)):
        out[n, f, i, j] = np.sum(x[n, :, i:i + k, j:j + k] * kernels[f]) + bias[f]
    return out


def maxpool_loops(x, k, stride):
    """Ceil-mode max pooling with windows truncated at the border.

    Returns the pooled values and, per output, the (row, col) of the first
    maximum in row-major window order.
    """
    b, c, h, w = x.shape

    def extent(n):
        return max(1, -(-(n - k) // stride) + 1)

    oh, ow = extent(h), extent(w)
    out = np.zeros((b, c, oh, ow))
    where = np.zeros((b, c, oh, ow, 2), dtype=int)
    for n, ch, i, j in itertools.product(range(b), range(c), range(oh), range(ow)):
        best, arg = -np.inf, None
        for di, dj in itertools.product(range(k), range(k)):
            r, s = i * stride + di, j * stride + dj
            if r < h and s < w and x[n, ch, r, s] > best:
                best, arg = x[n, ch, r, s], (r, s)
        out[n, ch, i, j] = best
        where[n, ch, i, j] = arg
    return out, where


def numeric_gradient(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` with respect to array ``x``
    (modified in place and restored)."""
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Norm-wise relative error, guarded for all-zero gradients."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def brute_force_next(net, layer, estimator, removed):
    """Exhaustive argmin over every single additional map removal.

    Evaluates each candidate masking through the full network forward pass
    (no caching) and returns ``(feature, loss)`` of the lowest loss, ties to
    the lowest index.
    """
    best = None
    for f in range(net.map_count(layer)):
        if f in removed:
            continue
        mask = np.ones(net.map_count(layer), bool)
        mask[list(removed) + [f]] = False
        value = estimator(net, {layer: mask})
        if best is None or value < best[1]:
            best = (f, value)
    return best
