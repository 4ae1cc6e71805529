"""Mini-batch training with validation-loss checkpoint selection."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..nn.layers import Module
from .loss import ShrinkageCfg, shrinkage_loss
from .optim import Adam, AdamCfg

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def total_seconds(self) -> float:
        return float(np.sum(self.epoch_seconds))

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0


def _snapshot(model: Module) -> list[np.ndarray]:
    return [p.value.copy() for p in model.parameters()] + [b.copy() for b in model.buffers()]


def _restore(model: Module, snap: list[np.ndarray]):
    for dst, src in zip([p.value for p in model.parameters()] + list(model.buffers()), snap):
        dst[...] = src


def evaluate_loss(model: Module, batches, shrink: ShrinkageCfg) -> float:
    """Sample-weighted mean shrinkage loss in eval mode."""
    model.eval()
    total, count = 0.0, 0
    for inputs, yz in batches:
        loss, _ = shrinkage_loss(model.forward(inputs), yz, shrink)
        total += loss * len(yz)
        count += len(yz)
    return total / count


def fit_network(model: Module, make_batch: Callable[[np.ndarray], object], y: np.ndarray, *,
                epochs: int, batch_size: int, rng: np.random.Generator,
                adam: AdamCfg = AdamCfg(), shrink: ShrinkageCfg = ShrinkageCfg(),
                val_batches: Sequence | None = None, lr_schedule: str = "constant",
                verbose: bool = False) -> TrainHistory:
    """Train ``model`` in place on standardised targets ``y``.

    ``make_batch(indices)`` returns the model input for those training rows.
    With ``val_batches`` (pairs of input and standardised target) the
    parameters of the epoch with the lowest validation loss are restored at
    the end; otherwise the last epoch is kept.  ``lr_schedule="cosine"``
    anneals the learning rate from ``adam.lr`` towards zero over the epochs.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    n = len(y)
    opt = Adam(model.parameters(), adam)
    hist = TrainHistory()
    best, best_snap = np.inf, None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if lr_schedule == "cosine":
            opt.lr = 0.5 * adam.lr * (1.0 + np.cos(np.pi * epoch / epochs))
        model.train()
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = model.forward(make_batch(idx))
            loss, grad = shrinkage_loss(out, y[idx], shrink) if np.all(np.isfinite(out)) else (np.nan, None)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            model.backward(grad)
            opt.step()
            running += loss * len(idx)
        hist.train_loss.append(running / n)
        if val_batches:
            vl = evaluate_loss(model, val_batches, shrink)
            if not np.isfinite(vl):
                raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
            hist.val_loss.append(vl)
            if vl < best:
                best, best_snap, hist.best_epoch = vl, _snapshot(model), epoch
        hist.epoch_seconds.append(time.perf_counter() - t0)
        if verbose:
            log.info("epoch %d train %.4f val %s (%.2fs)", epoch, hist.train_loss[-1],
                     f"{hist.val_loss[-1]:.4f}" if val_batches else "-", hist.epoch_seconds[-1])
    if best_snap is not None:
        _restore(model, best_snap)
    else:
        hist.best_epoch = epochs - 1
    model.eval()
    return hist
