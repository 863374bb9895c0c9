"""
Patch datasets, a synthetic membrane image generator and PGM image I/O.

Patches are ``n x n`` windows centred on a pixel (centre at ``n // 2``
along each axis). Windows that overhang the image border read from a
mirror-reflected copy of the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import FormatError, InputError, ShapeError


@dataclass
class LabeledImage:
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.image.ndim != 2 or self.image.shape != self.label.shape:
            raise ShapeError(
                f"image {self.image.shape} and label {self.label.shape} must be equal 2-D extents"
            )
        if self.label.size and self.label.max() > 1:
            raise InputError("label mask must be binary")


@dataclass
class PatchDataset:
    patches: np.ndarray  # N x 1 x n x n
    labels: np.ndarray  # N, int64 in {0, 1}
    split: str = "train"
    mirrored: bool = False

    def __len__(self):
        return len(self.labels)

    @property
    def patch_size(self):
        return self.patches.shape[-1]

    def class_balance(self):
        """Fraction of positive (membrane) patches."""
        return float(np.mean(self.labels)) if len(self) else 0.0

    def subset(self, index):
        return PatchDataset(self.patches[index], self.labels[index], self.split, self.mirrored)

    @classmethod
    def concat(cls, parts, split=None):
        parts = list(parts)
        if not parts:
            raise InputError("cannot concatenate zero datasets")
        return cls(
            np.concatenate([p.patches for p in parts]),
            np.concatenate([p.labels for p in parts]),
            split or parts[0].split,
            any(p.mirrored for p in parts),
        )


# ----------------------------------------------------------------------------
# Patch extraction
# ----------------------------------------------------------------------------

def _pad_widths(n):
    before = n // 2
    return before, n - 1 - before


def mirror_pad(image, n):
    before, after = _pad_widths(n)
    if min(image.shape) <= max(before, after):
        raise InputError(f"image extents {image.shape} too small to mirror-pad for {n}x{n} patches")
    return np.pad(image, ((before, after), (before, after)), mode="reflect")


def patch_windows(image, n):
    """View of shape H x W x n x n; ``[i, j]`` is the patch centred on (i, j)."""
    return sliding_window_view(mirror_pad(np.asarray(image, dtype=np.float64), n), (n, n))


def extract_patches(img, n, per_class, seed, split="train"):
    """Balanced membrane / non-membrane patches sampled without replacement."""
    if per_class < 1:
        raise InputError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    flat = img.label.ravel()
    chosen = []
    for cls, name in ((1, "membrane"), (0, "non-membrane")):
        pool = np.flatnonzero(flat == cls)
        if pool.size < per_class:
            raise InputError(
                f"need {per_class} {name} pixels but only {pool.size} exist "
                f"(deficit {per_class - pool.size})"
            )
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    index = np.concatenate(chosen)
    labels = np.concatenate([np.ones(per_class, np.int64), np.zeros(per_class, np.int64)])
    order = rng.permutation(index.size)
    index, labels = index[order], labels[order]

    H, W = img.image.shape
    rows, cols = np.divmod(index, W)
    windows = patch_windows(img.image, n)
    patches = windows[rows, cols][:, None].copy()
    before, after = _pad_widths(n)
    mirrored = bool(
        np.any((rows < before) | (cols < before) | (rows >= H - after) | (cols >= W - after))
    )
    return PatchDataset(patches, labels, split, mirrored)


# ----------------------------------------------------------------------------
# Synthetic membranes
# ----------------------------------------------------------------------------

def _closed_curve(rng, width, height, margin, r_min, r_max):
    rx = rng.uniform(r_min, r_max)
    ry = rng.uniform(r_min, r_max)
    cx = rng.uniform(rx * 1.3 + margin, width - rx * 1.3 - margin)
    cy = rng.uniform(ry * 1.3 + margin, height - ry * 1.3 - margin)
    angle = rng.uniform(0, np.pi)
    n_pts = int(np.ceil(2 * np.pi * max(rx, ry) * 6)) + 16
    theta = np.linspace(0, 2 * np.pi, n_pts, endpoint=False)
    # low-order radial wobble, bounded so the curve stays star-shaped
    wobble = np.ones_like(theta)
    for order in (2, 3, 4):
        wobble += rng.uniform(0, 0.08) * np.cos(order * theta + rng.uniform(0, 2 * np.pi))
    x0, y0 = rx * wobble * np.cos(theta), ry * wobble * np.sin(theta)
    ca, sa = np.cos(angle), np.sin(angle)
    return cx + ca * x0 - sa * y0, cy + sa * x0 + ca * y0, theta


def synth_membranes(
    width,
    height,
    curve_count,
    thickness_range=(2.0, 6.0),
    noise_sigma=0.05,
    seed=0,
):
    """Dark closed membranes of varying thickness on a textured background.

    The label mask is the curve skeleton dilated to the local stroke
    thickness. Curves are kept fully inside the frame, so each one forms a
    single connected component.
    """
    if width < 1 or height < 1:
        raise InputError("image extents must be positive")
    t_min, t_max = float(thickness_range[0]), float(thickness_range[1])
    if not 0 < t_min <= t_max:
        raise InputError("thickness range must satisfy 0 < min <= max")
    rng = np.random.default_rng(seed)

    texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma=3.0, mode="wrap")
    texture /= max(np.abs(texture).max(), 1e-12)
    image = 0.72 + 0.08 * texture
    label = np.zeros((height, width), np.uint8)

    margin = t_max / 2 + 1
    r_max = max(min(width, height) / 2 / 1.3 - margin - 0.5, 0.0)
    r_min = min(6.0, r_max)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(curve_count):
        if r_max <= 0:
            raise InputError(f"image {width}x{height} too small for a curve of thickness {t_max}")
        r_hi = min(r_max, max(r_min, min(width, height) / 7))
        px, py, theta = _closed_curve(rng, width, height, margin, r_min, r_hi)
        phase, freq = rng.uniform(0, 2 * np.pi), rng.integers(1, 4)
        half = 0.5 * (t_min + (t_max - t_min) * 0.5 * (1 + np.sin(freq * theta + phase)))

        x0 = int(max(np.floor(px.min() - t_max), 0))
        x1 = int(min(np.ceil(px.max() + t_max) + 1, width))
        y0 = int(max(np.floor(py.min() - t_max), 0))
        y1 = int(min(np.ceil(py.max() + t_max) + 1, height))
        gx = xx[y0:y1, x0:x1].ravel().astype(float)
        gy = yy[y0:y1, x0:x1].ravel().astype(float)
        stroke = np.zeros(gx.size, bool)
        for start in range(0, px.size, 256):
            sl = slice(start, start + 256)
            d2 = (gx[:, None] - px[None, sl]) ** 2 + (gy[:, None] - py[None, sl]) ** 2
            stroke |= np.any(d2 <= half[None, sl] ** 2, axis=1)
        stroke = stroke.reshape(y1 - y0, x1 - x0)

        inside = ndimage.binary_fill_holes(stroke) & ~stroke
        region = image[y0:y1, x0:x1]
        region[inside] -= rng.uniform(0.05, 0.15)
        region[stroke] = rng.uniform(0.18, 0.3) + 0.04 * texture[y0:y1, x0:x1][stroke]
        label[y0:y1, x0:x1] |= stroke.astype(np.uint8)

    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return LabeledImage(np.clip(image, 0.0, 1.0), label)


# ----------------------------------------------------------------------------
# PGM I/O
# ----------------------------------------------------------------------------

def save_image(image, path, bits=16):
    """Write a [0, 1] intensity array as a binary (P5) graymap."""
    if bits not in (8, 16):
        raise InputError("bits must be 8 or 16")
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2-D, got {arr.shape}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(arr * maxval)
    raw = q.astype(np.uint8).tobytes() if bits == 8 else q.astype(">u2").tobytes()
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw)


def save_mask(mask, path):
    save_image(np.asarray(mask, dtype=np.float64), path, bits=8)


def _read_token(data, pos):
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", offset=pos)
    return data[start:pos], pos


def load_image(path):
    """Read a binary graymap, returning intensities normalised to [0, 1]."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise FormatError(f"unsupported image format {magic[:8]!r}; expected binary PGM (P5)", offset=0)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PGM header field {tok!r}", offset=pos) from None
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError("invalid PGM extents or maxval", offset=pos)
    pos += 1  # single whitespace after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    nbytes = width * height * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise FormatError("PGM pixel data truncated", offset=len(data))
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def load_mask(path):
    return (load_image(path) >= 0.5).astype(np.uint8)
