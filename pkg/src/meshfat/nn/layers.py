"""Layers with explicit forward and exact backward passes (float64).

Every layer caches what its backward needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view


class BackwardError(RuntimeError):
    """backward called without a matching forward."""


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError("grad shape must equal value shape")

    def zero_grad(self):
        self.grad[...] = 0.0


class Module:
    """Parameter bookkeeping and train/eval mode shared by layers and models."""

    training = True

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[np.ndarray]:
        """Non-trainable state saved in checkpoints (running statistics)."""
        return []

    def children(self) -> list["Module"]:
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _check_width(x: np.ndarray, d: int, layer: str):
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"{layer}: expected input of shape (n, {d}), got {x.shape}")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    # He-uniform bound suited to relu stacks
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "linear"):
        if d_in < 1 or d_out < 1:
            raise ValueError(f"{name}: widths must be >= 1")
        self.d_in, self.d_out, self.name = d_in, d_out, name
        self.w = Parameter(_uniform(rng, d_in, (d_out, d_in)), name=f"{name}.w")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias")
        self._x = None

    def parameters(self):
        return [self.w, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_width(x, self.d_in, self.name)
        self._x = x
        return x @ self.w.value.T + self.bias.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise BackwardError(f"{self.name}: backward before forward")
        self.w.grad += g.T @ self._x
        self.bias.grad += g.sum(axis=0)
        return g @ self.w.value


class ReLU(Module):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, g):
        if self._mask is None:
            raise BackwardError("relu: backward before forward")
        return g * self._mask


class MLP(Module):
    """Affine layers with relu between them and an identity output."""

    def __init__(self, widths, rng: np.random.Generator, name: str = "mlp"):
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError(f"{name}: need at least input and output widths")
        self.layers = [Linear(a, b, rng, name=f"{name}.{i}")
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.acts = [ReLU() for _ in self.layers[:-1]]

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def children(self):
        return self.layers + self.acts

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.acts):
                x = self.acts[i].forward(x)
        return x

    def backward(self, g):
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.acts):
                g = self.acts[i].backward(g)
            g = self.layers[i].backward(g)
        return g


# ---------------------------------------------------------------------------
# Graph layers
# ---------------------------------------------------------------------------

class SageLayer(Module):
    """Mean aggregation over each node and its neighbours, then one affine map.

    ``out_v = act(W @ mean({x_v} | {x_u : u ~ v}) + bias)``
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 activation: str = "identity", name: str = "sage"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"{name}: activation must be 'relu' or 'identity'")
        if d_in < 1 or d_out < 1:
            raise ValueError(f"{name}: widths must be >= 1")
        self.d_in, self.d_out, self.activation, self.name = d_in, d_out, activation, name
        self.w = Parameter(_uniform(rng, d_in, (d_out, d_in)), name=f"{name}.w")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias")
        self._cache = None

    def parameters(self):
        return [self.w, self.bias]

    def forward(self, x: np.ndarray, op: sp.csr_matrix, op_t: sp.csr_matrix | None = None):
        """``op`` is the row-normalised ``D^-1 (A + I)`` of the (batched) graph."""
        _check_width(x, self.d_in, self.name)
        if op.shape != (len(x), len(x)):
            raise ValueError(f"{self.name}: aggregation operator shape {op.shape} "
                             f"does not match {len(x)} nodes")
        m = op @ x
        z = m @ self.w.value.T + self.bias.value
        mask = z > 0 if self.activation == "relu" else None
        self._cache = (m, op, op_t, mask)
        return np.where(mask, z, 0.0) if mask is not None else z

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardError(f"{self.name}: backward before forward")
        m, op, op_t, mask = self._cache
        if mask is not None:
            g = np.where(mask, g, 0.0)
        self.w.grad += g.T @ m
        self.bias.grad += g.sum(axis=0)
        gm = g @ self.w.value
        return (op_t if op_t is not None else op.T) @ gm


def sage_forward(layer: SageLayer, x, edges, n_nodes: int | None = None):
    """Apply ``layer`` to one graph given as an edge list."""
    from ..graph import mean_operator

    x = np.asarray(x, dtype=np.float64)
    return layer.forward(x, mean_operator(edges, n_nodes or len(x)))


@njit(cache=True)
def _bn_train_forward(x, gamma, beta, eps):
    n, d = x.shape
    mu = np.zeros(d)
    var = np.zeros(d)
    for i in range(n):
        for j in range(d):
            mu[j] += x[i, j]
    mu /= n
    for i in range(n):
        for j in range(d):
            t = x[i, j] - mu[j]
            var[j] += t * t
    var /= n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            h = (x[i, j] - mu[j]) * inv[j]
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, mu, var, inv


@njit(cache=True)
def _bn_train_backward(g, xhat, gamma, inv):
    n, d = g.shape
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        for j in range(d):
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
    dx = np.empty_like(g)
    for i in range(n):
        for j in range(d):
            dx[i, j] = inv[j] * gamma[j] * (g[i, j] - dbeta[j] / n - xhat[i, j] * dgamma[j] / n)
    return dx, dgamma, dbeta


class BatchNorm1d(Module):
    """Per-feature normalisation over rows (nodes or samples)."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        if not eps > 0:
            raise ValueError(f"{name}: eps must be positive")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"{name}: momentum must lie in [0, 1]")
        self.d, self.momentum, self.eps, self.name = d, momentum, eps, name
        self.gamma = Parameter(np.ones(d), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(d), name=f"{name}.beta")
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_width(x, self.d, self.name)
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValueError(f"{self.name}: train mode needs a batch of at least 2 rows")
            out, xhat, mu, var, inv = _bn_train_forward(np.ascontiguousarray(x), self.gamma.value,
                                                        self.beta.value, self.eps)
            k = self.momentum
            self.running_mean *= 1.0 - k
            self.running_mean += k * mu
            self.running_var *= 1.0 - k
            self.running_var += k * var * (n / (n - 1))
            self._cache = ("train", xhat, inv)
            return out
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
            self._cache = ("eval", xhat, inv)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardError(f"{self.name}: backward before forward")
        mode, xhat, inv = self._cache
        if mode == "train":
            dx, dgamma, dbeta = _bn_train_backward(np.ascontiguousarray(g), xhat,
                                                   self.gamma.value, inv)
            self.gamma.grad += dgamma
            self.beta.grad += dbeta
            return dx
        self.gamma.grad += (g * xhat).sum(axis=0)
        self.beta.grad += g.sum(axis=0)
        return g * self.gamma.value * inv


def global_max_pool(x: np.ndarray, graph_id: np.ndarray, n_graphs: int | None = None):
    """Per-graph column maxima; returns ``(pooled, argmax_rows)``.

    ``graph_id`` must be non-decreasing.  Ties resolve to the first row.
    """
    x = np.asarray(x, dtype=np.float64)
    graph_id = np.asarray(graph_id, dtype=np.int64)
    if len(graph_id) != len(x):
        raise ValueError("graph_id must label every node")
    if len(x) == 0:
        raise ValueError("cannot pool an empty node set")
    if (np.diff(graph_id) < 0).any():
        raise ValueError("graph_id must be non-decreasing")
    n_graphs = int(graph_id[-1]) + 1 if n_graphs is None else n_graphs
    counts = np.bincount(graph_id, minlength=n_graphs)
    if (counts == 0).any():
        raise ValueError(f"graph {int(np.argmin(counts))} has no nodes")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pooled = np.maximum.reduceat(x, starts, axis=0)
    rows = np.arange(len(x))[:, None]
    hit = np.where(x == pooled[graph_id], rows, len(x))
    argmax = np.minimum.reduceat(hit, starts, axis=0)
    return pooled, argmax


def global_max_pool_backward(g: np.ndarray, argmax: np.ndarray, n_nodes: int) -> np.ndarray:
    out = np.zeros((n_nodes, g.shape[1]))
    cols = np.broadcast_to(np.arange(g.shape[1]), g.shape)
    # each (row, column) target is unique: one winner per graph and column
    out[argmax, cols] = g
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

class Conv2d(Module):
    """Square-kernel 2D cross-correlation over NCHW input via im2col."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 2, padding: int = 1, name: str = "conv"):
        if min(c_in, c_out, kernel, stride) < 1 or padding < 0:
            raise ValueError(f"{name}: invalid geometry")
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        self.name = name
        fan_in = c_in * kernel * kernel
        self.w = Parameter(_uniform(rng, fan_in, (c_out, c_in, kernel, kernel)), name=f"{name}.w")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")
        self._cache = None

    def parameters(self):
        return [self.w, self.bias]

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"{self.name}: expected input (B, {self.c_in}, H, W), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.padding
        b, _, h, w = x.shape
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.name}: input {h}x{w} is smaller than the kernel")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        out = cols @ self.w.value.reshape(self.c_out, -1).T + self.bias.value
        self._cache = (cols, x.shape, ho, wo)
        return out.reshape(b, ho, wo, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardError(f"{self.name}: backward before forward")
        cols, shape, ho, wo = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        b, c, h, w = shape
        gf = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.c_out)
        self.w.grad += (gf.T @ cols).reshape(self.w.value.shape)
        self.bias.grad += gf.sum(axis=0)
        gcols = (gf @ self.w.value.reshape(self.c_out, -1)).reshape(b, ho, wo, c, k, k)
        gxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + w]
