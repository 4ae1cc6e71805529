"""Shrinkage loss: squared error damped by a logistic factor for small residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class ShrinkageCfg:
    a: float = 10.0  # sharpness of the logistic gate
    c: float = 0.2  # residual at which the gate is half open

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("shrinkage sharpness a must be positive")
        if not self.c >= 0:
            raise ValueError("shrinkage threshold c must be non-negative")


def shrinkage_loss(pred, target, cfg: ShrinkageCfg = ShrinkageCfg()):
    """Mean of ``l^2 / (1 + exp(a (c - l)))`` with ``l = |pred - target|``.

    Returns ``(loss, d loss / d pred)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValueError("shrinkage_loss received non-finite values")
    d = pred - target
    l = np.abs(d)
    s = expit(cfg.a * (l - cfg.c))
    loss = float(np.mean(l * l * s))
    # d/dl [l^2 s] = 2 l s + a l^2 s (1 - s); d l / d pred = sign(d)
    grad = d * (2.0 * s + cfg.a * l * s * (1.0 - s)) / d.size
    return loss, grad
