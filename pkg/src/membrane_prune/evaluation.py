"""
Accuracy, timing, parameter and memory accounting, and sliding-window
segmentation.

Memory convention used by :func:`estimate_memory`: all parameters plus the
largest pair of simultaneously live activation buffers (a layer's input and
its output) for the given batch size, counted at 4 bytes per value.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import net as netlib
from .data import patch_windows
from .errors import InputError

BYTES_PER_VALUE = 4
REPORT_FIELDS = ("name", "A", "T_seconds", "deltaP_percent", "M_bytes")


@dataclass
class EvalReport:
    name: str
    accuracy: float
    seconds: float
    delta_p: float
    memory: int

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise InputError(f"accuracy {self.accuracy} outside [0, 1]")
        if not 0 <= self.delta_p < 1:
            raise InputError(f"deltaP {self.delta_p} outside [0, 1)")
        if not self.seconds > 0:
            raise InputError("segmentation time must be positive")

    def row(self):
        return [self.name, repr(self.accuracy), f"{self.seconds:.6f}",
                f"{100 * self.delta_p:.4f}", str(self.memory)]


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            writer.writerow(r.row())


def read_reports(path):
    with open(path, newline="") as fh:
        return [
            EvalReport(r["name"], float(r["A"]), float(r["T_seconds"]),
                       float(r["deltaP_percent"]) / 100, int(r["M_bytes"]))
            for r in csv.DictReader(fh)
        ]


def predict(net, patches, chunk=256):
    """Class decisions; an exact 0.5/0.5 tie goes to class 0."""
    probs = net.forward(patches, chunk=chunk)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def accuracy(net, dataset, chunk=256):
    if len(dataset) == 0:
        raise InputError("validation set is empty")
    return float(np.mean(predict(net, dataset.patches, chunk) == dataset.labels))


def count_params(net):
    return netlib.count_params(net)


def delta_p(net, reference):
    """Fraction of ``reference``'s parameters absent from ``net``."""
    return 1.0 - count_params(net)[0] / count_params(reference)[0]


def estimate_memory(net, batch_size=1):
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    cfg = net.config
    kept = [int(net.masks[layer].sum()) for layer in netlib.PRUNABLE]
    ext = cfg.spatial_extents()
    sizes = [cfg.patch_size ** 2]  # input
    for i in range(3):
        sizes.append(kept[i] * ext[2 * i] ** 2)  # conv output
        sizes.append(kept[i] * ext[2 * i + 1] ** 2)  # pooled
    sizes += [kept[3], netlib.N_CLASSES]
    peak = max(a + b for a, b in zip(sizes, sizes[1:]))
    return BYTES_PER_VALUE * (count_params(net)[0] + batch_size * peak)


def probability_map(net, image, stride=1, chunk=256):
    """Membrane probability for every pixel, via its centred patch.

    With ``stride > 1`` only every ``stride``-th pixel is evaluated and the
    map is filled by nearest-neighbour repetition.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise InputError(f"degenerate image extents {image.shape}")
    if stride < 1:
        raise InputError("stride must be >= 1")
    n = net.config.patch_size
    windows = patch_windows(image, n)[::stride, ::stride]
    h, w = windows.shape[:2]
    flat = windows.reshape(h * w, n, n)
    out = np.empty(h * w)
    for start in range(0, h * w, chunk):
        batch = flat[start:start + chunk][:, None]
        out[start:start + chunk] = net.forward(batch, chunk=chunk)[:, 1]
    pmap = out.reshape(h, w)
    if stride > 1:
        pmap = np.repeat(np.repeat(pmap, stride, 0), stride, 1)[: image.shape[0], : image.shape[1]]
    return pmap


def threshold_map(pmap, t=0.5):
    if not 0 <= t <= 1:
        raise InputError("threshold must lie in [0, 1]")
    return (np.asarray(pmap) >= t).astype(np.uint8)


def pixel_f1(segmentation, truth):
    seg, truth = np.asarray(segmentation, bool), np.asarray(truth, bool)
    tp = np.sum(seg & truth)
    denom = seg.sum() + truth.sum()
    return 2.0 * tp / denom if denom else 1.0


def threshold_sweep(pmap, truth, thresholds=None):
    """Pixel F1 of the thresholded map for each threshold."""
    if thresholds is None:
        thresholds = np.linspace(0.05, 0.95, 19)
    return [(float(t), pixel_f1(threshold_map(pmap, t), truth)) for t in thresholds]


@dataclass
class Timing:
    seconds: float
    patches_per_second: float
    samples: list


def time_segmentation(net, image, repetitions=3, stride=1):
    """Median wall-clock time of :func:`probability_map`, after one discarded warm-up."""
    if repetitions < 3:
        raise InputError("repetitions must be >= 3")
    probability_map(net, image, stride)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        probability_map(net, image, stride)
        samples.append(time.perf_counter() - t0)
    median = statistics.median(samples)
    pixels = np.ceil(image.shape[0] / stride) * np.ceil(image.shape[1] / stride)
    return Timing(median, float(pixels / median), samples)


def evaluate(name, net, reference, val_set, image, repetitions=3):
    timing = time_segmentation(net, image, repetitions)
    return EvalReport(name, accuracy(net, val_set), timing.seconds,
                      delta_p(net, reference), estimate_memory(net, 1))
