"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn.layers import Parameter


@dataclass(frozen=True)
class AdamCfg:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


class Adam:
    def __init__(self, params: list[Parameter], cfg: AdamCfg = AdamCfg()):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(params: list[Parameter], opt: Adam):
    """One optimiser step over ``params`` (which must be ``opt``'s parameters)."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("parameters do not belong to this optimiser")
    opt.step()
