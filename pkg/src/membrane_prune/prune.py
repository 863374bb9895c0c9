"""
Loss-based feature-map pruning.

For one layer the greedy ordering repeatedly discards the map whose
removal leaves the smallest training loss, given the maps already
discarded::

    f_{l+1} = argmin_{f not yet removed} loss(W with {f_1, ..., f_l, f} zeroed)

Layers are processed bottom-up (c1, c2, c3, fc4). After a layer has been
ordered, its plan-specified number of maps is masked before the next layer
is ordered, so deeper orderings see the already-pruned shallow layers.

The loss is estimated on a fixed set of mini-batches drawn once per
ordering from a seed, so every candidate in a step is scored on identical
data and every recorded value can be replayed exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import net as netlib
from . import tensor as T
from .errors import InputError

STRATEGIES = ("loss-greedy", "sparsity", "random")


@dataclass(frozen=True)
class PrunePlan:
    keep: tuple
    strategy: str = "loss-greedy"
    batch_count: int = 8
    batch_size: int = 256
    seed: int = 0
    include_l2: bool = False
    lam: float = 0.0

    def __post_init__(self):
        keep = tuple(int(k) for k in self.keep)
        object.__setattr__(self, "keep", keep)
        if len(keep) != len(netlib.PRUNABLE):
            raise InputError(f"plan needs {len(netlib.PRUNABLE)} keep-counts, got {len(keep)}")
        if min(keep) < 1:
            raise InputError("every keep-count must be >= 1")
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.batch_count < 1 or self.batch_size < 1:
            raise InputError("batch_count and batch_size must be >= 1")

    @classmethod
    def named(cls, name, **kwargs):
        if name not in netlib.NAMED_CONFIGS:
            raise InputError(f"unknown plan {name!r}")
        return cls(netlib.NAMED_CONFIGS[name], **kwargs)

    def keep_for(self, layer):
        return self.keep[netlib.PRUNABLE.index(layer)]

    def estimator(self, dataset):
        return LossEstimator(dataset, self.batch_count, self.batch_size, self.seed,
                             self.lam if self.include_l2 else 0.0)


@dataclass
class PruneOrdering:
    layer: str
    features: list
    losses: list
    strategy: str = "loss-greedy"
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.features) != len(self.losses):
            raise InputError("features and losses must have equal length")

    def __len__(self):
        return len(self.features)

    def discarded(self, keep):
        """The first ``n - keep`` features: those removed to keep ``keep`` maps."""
        if keep > len(self.features):
            raise InputError(
                f"cannot keep {keep} maps of {self.layer}: only {len(self.features)} exist"
            )
        return self.features[: len(self.features) - keep]


# ----------------------------------------------------------------------------
# Loss estimation
# ----------------------------------------------------------------------------

def masked_l2(net, masks):
    """``||W||^2`` with the kernel/bias rows of maps dropped by ``masks`` excluded."""
    total = 0.0
    for name, p in net.params.items():
        layer = name.split(".")[0]
        if layer in masks and not masks[layer].all():
            p = p[masks[layer]]
        total += float(np.sum(p * p))
    return total


class LossEstimator:
    """Mean data loss over a fixed, seeded set of mini-batches.

    With ``lam > 0`` the L2 term ``lam * ||W||^2`` of the masked network is
    added; by default only the data term is used.
    """

    def __init__(self, dataset, batch_count=8, batch_size=256, seed=0, lam=0.0):
        if len(dataset) == 0:
            raise InputError("loss estimation needs a nonempty dataset")
        if batch_count < 1 or batch_size < 1:
            raise InputError("batch_count and batch_size must be >= 1")
        self.batch_count, self.batch_size, self.seed, self.lam = batch_count, batch_size, seed, lam
        rng = np.random.default_rng(seed)
        size = min(batch_size, len(dataset))
        self.batches = []
        for _ in range(batch_count):
            idx = rng.choice(len(dataset), size=size, replace=False)
            self.batches.append((dataset.patches[idx], dataset.labels[idx]))

    @property
    def settings(self):
        return {"batch_count": self.batch_count, "batch_size": self.batch_size,
                "seed": self.seed, "lam": self.lam}

    def _total(self, data_losses, net, masks):
        value = float(np.mean(data_losses))
        if self.lam:
            value += self.lam * masked_l2(net, masks)
        return value

    def __call__(self, net, masks=None):
        """Reference path: full forward pass from the patches."""
        full = net.resolve_masks(masks)
        data_losses = [T.softmax_xent(net.logits(x, full), y)[0] for x, y in self.batches]
        return self._total(data_losses, net, full)

    def layer_evaluator(self, net, layer):
        """Fast scorer for masks of one layer, with all other masks fixed.

        Caches the layer's full output per batch; each call selects the kept
        maps and runs the remaining layers. Matches :meth:`__call__` bit for
        bit because relu and pooling act channel by channel.
        """
        cached = []
        for x, y in self.batches:
            a = net.activations_before(layer, x)
            cached.append((net.layer_outputs(layer, a), y))

        def score(mask):
            masks = dict(net.masks)
            masks[layer] = mask
            keep = slice(None) if mask.all() else np.flatnonzero(mask)
            data_losses = [
                T.softmax_xent(net.logits_after(layer, out[:, keep], masks), y)[0]
                for out, y in cached
            ]
            return self._total(data_losses, net, masks)

        return score


# ----------------------------------------------------------------------------
# Orderings
# ----------------------------------------------------------------------------

def _scorer(net, layer, estimator, fast):
    if fast:
        return estimator.layer_evaluator(net, layer)
    return lambda mask: estimator(net, {layer: mask})


def _check_layer(net, layer):
    if layer not in netlib.PRUNABLE:
        raise InputError(f"layer {layer!r} is not prunable; choose from {netlib.PRUNABLE}")
    if not net.masks[layer].any():
        raise InputError(f"layer {layer} is already fully masked")


def _premasked_prefix(net, layer, score):
    """Maps masked before the call lead the ordering, in index order."""
    mask = np.ones_like(net.masks[layer])
    features, losses = [], []
    for f in np.flatnonzero(~net.masks[layer]):
        mask[f] = False
        features.append(int(f))
        losses.append(score(mask.copy()))
    return features, losses


def _cumulative(net, layer, order, score):
    features, losses = _premasked_prefix(net, layer, score)
    mask = net.masks[layer].copy()
    for f in order:
        mask[f] = False
        features.append(int(f))
        losses.append(score(mask.copy()))
    return features, losses


def order_layer(net, layer, estimator, fast=True):
    """Greedy loss-minimising discard order for every map of ``layer``.

    Ties go to the lowest feature index. ``net`` is not modified.
    """
    _check_layer(net, layer)
    score = _scorer(net, layer, estimator, fast)
    features, losses = _premasked_prefix(net, layer, score)
    mask = net.masks[layer].copy()
    remaining = list(np.flatnonzero(mask))
    while remaining:
        trial = []
        for f in remaining:
            candidate = mask.copy()
            candidate[f] = False
            trial.append(score(candidate))
        best = int(np.argmin(trial))  # first minimum = lowest index
        f = remaining.pop(best)
        mask[f] = False
        features.append(int(f))
        losses.append(trial[best])
    return PruneOrdering(layer, features, losses, "loss-greedy", estimator.settings)


def map_l1_norms(net, layer):
    w = net.params[f"{layer}.w"]
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1) + np.abs(net.params[f"{layer}.b"])


def sparsity_order_layer(net, layer, estimator, fast=True):
    """Magnitude baseline: maps ranked by ascending L1 norm of kernel + bias."""
    _check_layer(net, layer)
    norms = map_l1_norms(net, layer)
    live = np.flatnonzero(net.masks[layer])
    order = live[np.argsort(norms[live], kind="stable")]
    features, losses = _cumulative(net, layer, order, _scorer(net, layer, estimator, fast))
    return PruneOrdering(layer, features, losses, "sparsity", estimator.settings)


def random_order_layer(net, layer, estimator, seed, fast=True):
    """Uniformly random discard order (control baseline)."""
    _check_layer(net, layer)
    live = np.flatnonzero(net.masks[layer])
    order = np.random.default_rng(seed).permutation(live)
    features, losses = _cumulative(net, layer, order, _scorer(net, layer, estimator, fast))
    settings = dict(estimator.settings, random_seed=int(seed))
    return PruneOrdering(layer, features, losses, "random", settings)


def order_with(strategy, net, layer, estimator, seed=0, fast=True):
    if strategy == "loss-greedy":
        return order_layer(net, layer, estimator, fast)
    if strategy == "sparsity":
        return sparsity_order_layer(net, layer, estimator, fast)
    if strategy == "random":
        return random_order_layer(net, layer, estimator, seed, fast)
    raise InputError(f"unknown strategy {strategy!r}")


def order_network(net, plan, dataset, known=None, fast=True):
    """Orderings for c1, c2, c3, fc4 in that order.

    Each layer is masked down to its plan keep-count before the next layer
    is ordered. ``known`` maps layer names to orderings already computed
    under the same upstream state (e.g. c1, which no plan influences); they
    are reused instead of recomputed. ``net`` is not modified.
    """
    known = known or {}
    work = net.copy()
    estimator = plan.estimator(dataset)
    orderings = []
    for layer in netlib.PRUNABLE:
        if layer in known:
            ordering = known[layer]
        else:
            ordering = order_with(plan.strategy, work, layer, estimator, plan.seed, fast)
        orderings.append(ordering)
        work.discard(layer, ordering.discarded(plan.keep_for(layer)))
    return orderings


def apply_plan(net, orderings, plan):
    """Mask the first ``n - keep`` maps of each ordering, then shrink."""
    work = net.copy()
    by_layer = {o.layer: o for o in orderings}
    for layer in netlib.PRUNABLE:
        keep = plan.keep_for(layer)
        if keep > work.map_count(layer):
            raise InputError(f"keep-count {keep} exceeds the {work.map_count(layer)} maps of {layer}")
        if layer not in by_layer:
            if keep != work.map_count(layer):
                raise InputError(f"no ordering for layer {layer}")
            continue
        work.discard(layer, by_layer[layer].discarded(keep))
    return netlib.shrink(work)


def replay(net, ordering, dataset):
    """Recompute an ordering's cumulative losses with the reference path."""
    s = ordering.settings
    estimator = LossEstimator(dataset, s["batch_count"], s["batch_size"], s["seed"], s.get("lam", 0.0))
    mask = np.ones(net.map_count(ordering.layer), bool)
    values = []
    for f in ordering.features:
        mask[f] = False
        values.append(estimator(net, {ordering.layer: mask.copy()}))
    return values


def replay_network(net, orderings, plan, dataset):
    """Replay every ordering under the upstream masking it was computed with."""
    work = net.copy()
    replayed = []
    for ordering in orderings:
        replayed.append(replay(work, ordering, dataset))
        work.discard(ordering.layer, ordering.discarded(plan.keep_for(ordering.layer)))
    return replayed


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

ORDERING_FIELDS = ("step", "feature_index", "cumulative_loss")


def write_ordering(ordering, path, header=None):
    """CSV with ``# key=value`` provenance lines ahead of the column header."""
    meta = {"layer": ordering.layer, "strategy": ordering.strategy, **ordering.settings}
    meta.update(header or {})
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ORDERING_FIELDS)
        for step, (f, v) in enumerate(zip(ordering.features, ordering.losses), start=1):
            writer.writerow([step, f, repr(float(v))])


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_ordering(path):
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = _parse_value(value)
        else:
            body.append(line)
    for r in csv.DictReader(body):
        rows.append((int(r["feature_index"]), float(r["cumulative_loss"])))
    settings = {k: meta[k] for k in ("batch_count", "batch_size", "seed", "lam", "random_seed") if k in meta}
    return PruneOrdering(meta["layer"], [f for f, _ in rows], [v for _, v in rows],
                         meta.get("strategy", "loss-greedy"), settings)
