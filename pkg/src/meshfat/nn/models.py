"""Graph and silhouette regressors assembled from :mod:`meshfat.nn.layers`."""
from __future__ import annotations

import numpy as np

from .layers import (MLP, BackwardError, BatchNorm1d, Conv2d, Module, ReLU, SageLayer,
                     global_max_pool, global_max_pool_backward)


class GnnModel(Module):
    """Three SAGE layers (each followed by batch norm and relu), max pool, MLP head."""

    kind = "gnn"

    def __init__(self, in_dim: int = 3, hidden: int = 64, seed: int = 0,
                 bn_momentum: float = 0.1, n_out: int = 2):
        if hidden < 2:
            raise ValueError("hidden width must be at least 2")
        rng = np.random.default_rng(seed)
        self.config = {"in_dim": in_dim, "hidden": hidden, "seed": seed,
                       "bn_momentum": bn_momentum, "n_out": n_out}
        widths = [in_dim, hidden, hidden, hidden]
        self.convs = [SageLayer(a, b, rng, "identity", name=f"sage{i}")
                      for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.norms = [BatchNorm1d(hidden, momentum=bn_momentum, name=f"bn{i}") for i in range(3)]
        self.acts = [ReLU() for _ in range(3)]
        self.head = MLP([hidden, hidden, hidden // 2, n_out], rng, name="head")
        self._pool = None

    def children(self):
        return self.convs + self.norms + self.acts + [self.head]

    def parameters(self):
        out = []
        for conv, norm in zip(self.convs, self.norms):
            out += conv.parameters() + norm.parameters()
        return out + self.head.parameters()

    def buffers(self):
        return [b for n in self.norms for b in n.buffers()]

    def forward(self, batch) -> np.ndarray:
        """``batch`` is a :class:`~meshfat.graph.GraphBatch`; returns B x n_out."""
        h = batch.x
        op, op_t = batch.mean_op, batch.mean_op_t
        for conv, norm, act in zip(self.convs, self.norms, self.acts):
            h = act.forward(norm.forward(conv.forward(h, op, op_t)))
        pooled, argmax = global_max_pool(h, batch.graph_id, batch.n_graphs)
        self._pool = (argmax, len(h))
        return self.head.forward(pooled)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._pool is None:
            raise BackwardError("gnn: backward before forward")
        argmax, n = self._pool
        g = global_max_pool_backward(self.head.backward(g), argmax, n)
        for conv, norm, act in zip(self.convs[::-1], self.norms[::-1], self.acts[::-1]):
            g = conv.backward(norm.backward(act.backward(g)))
        return g


class CnnModel(Module):
    """Three strided convolutions with relu, flatten, MLP head."""

    kind = "cnn"

    def __init__(self, in_shape=(2, 64, 64), channels=(16, 32, 64), hidden: int = 64,
                 seed: int = 0, n_out: int = 2, kernel: int = 3, stride: int = 2):
        in_shape = tuple(int(s) for s in in_shape)
        if len(in_shape) != 3:
            raise ValueError("in_shape must be (channels, height, width)")
        rng = np.random.default_rng(seed)
        self.config = {"in_shape": list(in_shape), "channels": list(channels), "hidden": hidden,
                       "seed": seed, "n_out": n_out, "kernel": kernel, "stride": stride}
        self.in_shape = in_shape
        c, h, w = in_shape
        self.convs = []
        for i, co in enumerate(channels):
            conv = Conv2d(c, co, rng, kernel=kernel, stride=stride, padding=kernel // 2,
                          name=f"conv{i}")
            h, w = conv.output_shape(h, w)
            if h < 1 or w < 1:
                raise ValueError(f"conv{i}: input resolution {in_shape[1:]} is too small")
            self.convs.append(conv)
            c = co
        self.acts = [ReLU() for _ in self.convs]
        self.flat_shape = (c, h, w)
        self.head = MLP([c * h * w, hidden, hidden // 2, n_out], rng, name="head")
        self._batch = None

    def children(self):
        return self.convs + self.acts + [self.head]

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()] + self.head.parameters()

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ValueError(f"cnn: expected images of shape (B, {self.in_shape}), got {x.shape}")
        for conv, act in zip(self.convs, self.acts):
            x = act.forward(conv.forward(x))
        self._batch = x.shape[0]
        return self.head.forward(x.reshape(x.shape[0], -1))

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._batch is None:
            raise BackwardError("cnn: backward before forward")
        g = self.head.backward(g).reshape((self._batch,) + self.flat_shape)
        for conv, act in zip(self.convs[::-1], self.acts[::-1]):
            g = conv.backward(act.backward(g))
        return g


def build_model(kind: str, config: dict) -> Module:
    if kind == "gnn":
        return GnnModel(**config)
    if kind == "cnn":
        return CnnModel(**config)
    raise ValueError(f"unknown model kind {kind!r}")
