"""SGD with momentum, L2 weight decay and a linearly decaying learning rate."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import net as netlib
from .errors import InputError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    lam: float = 0.01
    batch_size: int = 256
    iterations: int = 1000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InputError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise InputError("lam must be >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise InputError("batch_size and log_every must be >= 1, iterations >= 0")

    def lr_at(self, iteration):
        """Linear decay from ``base_lr`` at 0 to zero at ``iterations``."""
        if self.iterations == 0:
            return self.base_lr
        return self.base_lr * (1.0 - iteration / self.iterations)


@dataclass
class FitResult:
    net: netlib.Network
    history: list = field(default_factory=list)
    velocity: dict = field(default_factory=dict)
    iteration: int = 0
    pending: list = field(default_factory=list)  # losses since the last history row


def zero_velocity(net):
    return {name: np.zeros_like(p) for name, p in net.params.items()}


def objective_and_gradients(net, x, labels, lam):
    """Batch-mean data loss plus ``lam * ||W||^2`` and its gradient."""
    data_loss, grads = net.loss_and_gradients(x, labels)
    total = data_loss + lam * netlib.l2_penalty(net)
    return total, {name: g + 2.0 * lam * net.params[name] for name, g in grads.items()}


def sgd_step(net, batch, config, velocity, lr=None):
    """One momentum step, applied to ``net`` and ``velocity`` in place.

    ``v <- momentum * v - lr * (grad + 2 * lam * W)``, ``W <- W + v``.
    Parameters of masked maps are held at zero. Returns the batch data loss.
    """
    x, labels = batch
    if len(labels) == 0:
        raise InputError("empty batch")
    lr = config.base_lr if lr is None else lr
    data_loss, grads = net.loss_and_gradients(x, labels)
    masked = net.is_masked()
    for name, w in net.params.items():
        v = velocity[name]
        v *= config.momentum
        v -= lr * (grads[name] + 2.0 * config.lam * w)
        if masked:
            v *= net.parameter_mask(name)
        w += v
        if not np.all(np.isfinite(w)):
            raise NumericError(f"non-finite parameters in layer {name.split('.')[0]}")
    return data_loss


def batch_indices(n_items, batch_size, seed, iteration):
    """Indices of the mini-batch used at ``iteration``.

    Each epoch is a fresh seeded permutation, so the batch at any iteration
    is reproducible without replaying earlier ones (needed for resuming).
    """
    if n_items == 0:
        raise InputError("empty training set")
    size = min(batch_size, n_items)
    per_epoch = n_items // size
    epoch, slot = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return perm[slot * size:(slot + 1) * size]


def fit(net, train_set, val_set, config, state=None, stop=None, callback=None):
    """Train a copy of ``net`` for ``config.iterations`` steps.

    ``state`` (a previous :class:`FitResult`) resumes from its iteration and
    momentum buffers; the result is identical to an uninterrupted run.
    ``stop`` ends the run early at that iteration (the schedule still spans
    ``config.iterations``). ``callback`` receives a :class:`FitResult`
    snapshot after every history row.
    """
    from .evaluation import accuracy

    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("training and validation sets must be nonempty")
    if state is None:
        net = net.copy()
        velocity = zero_velocity(net)
        start, history, running = 0, [], []
    else:
        net = state.net.copy()
        velocity = {k: v.copy() for k, v in state.velocity.items()}
        start, history = state.iteration, list(state.history)
        running = list(state.pending)

    end = config.iterations if stop is None else min(stop, config.iterations)
    for it in range(start, end):
        idx = batch_indices(len(train_set), config.batch_size, config.seed, it)
        lr = config.lr_at(it)
        try:
            loss = sgd_step(net, (train_set.patches[idx], train_set.labels[idx]), config, velocity, lr)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from None
        running.append(loss)
        done = it + 1
        if done % config.log_every == 0 or done == config.iterations:
            acc = accuracy(net, val_set)
            history.append(
                {"iteration": done, "train_loss": float(np.mean(running)), "val_accuracy": acc, "lr": lr}
            )
            log.info("iter %d loss %.4f val_acc %.4f lr %.2e", done, history[-1]["train_loss"], acc, lr)
            running = []
            if callback is not None:
                callback(_snapshot(net, history, velocity, done, running, config))
    return _snapshot(net, history, velocity, max(start, end), running, config)


def _snapshot(net, history, velocity, iteration, pending, config):
    net.meta.update(
        {"iteration": iteration, "base_lr": config.base_lr, "lr": config.lr_at(iteration),
         "train_seed": config.seed, "pending_losses": list(pending)}
    )
    return FitResult(net, list(history), velocity, iteration, list(pending))


def retrain(net, train_set, val_set, config, lr_factor=0.1, budget_fraction=0.25):
    """Warm-start retraining of a pruned network at a reduced learning rate."""
    if lr_factor < 0 or budget_fraction < 0:
        raise InputError("lr_factor and budget_fraction must be >= 0")
    iterations = int(round(config.iterations * budget_fraction))
    if lr_factor == 0 or iterations == 0:
        return FitResult(net.copy(), [], zero_velocity(net), 0)
    cfg = replace(config, base_lr=config.base_lr * lr_factor, iterations=iterations)
    return fit(net, train_set, val_set, cfg)


HISTORY_FIELDS = ("iteration", "train_loss", "val_accuracy", "lr")


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path):
    with open(path, newline="") as fh:
        return [
            {"iteration": int(r["iteration"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}}
            for r in csv.DictReader(fh)
        ]
