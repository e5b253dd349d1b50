"""Layers, initialization, SGD, gradient reversal and classification losses."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, add, clamp, log, log_softmax, matmul, reduce_mean, reshape, transpose


def philox(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based generator keyed by a seed and a stream path.

    Stream components are hashed with CRC32 so that the same (seed, names)
    pair always yields the same sequence regardless of call order elsewhere.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, 0]
    for part in stream:
        h = zlib.crc32(str(part).encode()) if isinstance(part, str) else int(part) & 0xFFFFFFFF
        key[1] = (key[1] * 0x100000001B3 + h + 1) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


class Linear:
    """y = x W^T + b with W of shape [out, in]."""

    def __init__(self, n_in: int, n_out: int, seed: int = 0, name: str = "linear"):
        if n_in < 1 or n_out < 1:
            raise ValueError("layer dims must be positive")
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.weight = Tensor(np.zeros((n_out, n_in)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True)
        init_params(self, seed)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


def init_params(layer: Linear, seed: int) -> None:
    """Uniform(-sqrt(1/in), sqrt(1/in)) weights, zero bias."""
    bound = np.sqrt(1.0 / layer.n_in)
    rng = philox(seed, layer.name)
    layer.weight.data = rng.uniform(-bound, bound, size=(layer.n_out, layer.n_in))
    layer.bias.data = np.zeros((1, layer.n_out))
    layer.weight.grad = layer.bias.grad = None


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"{layer.name}: expected [B, {layer.n_in}] input, got {x.shape}")
    return add(matmul(x, transpose(layer.weight)), layer.bias)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, gradient times -lam backward."""
    if lam < 0:
        raise ValueError("GRL strength must be non-negative")
    factor = -float(lam)
    return Tensor._make(x.data, (x,), lambda g: (g * factor,), "grl")


def _labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n_rows:
        raise ShapeError(f"{y.size} labels for {n_rows} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    B, M = logits.shape
    y = _labels(labels, B, M)
    onehot = np.zeros((B, M))
    onehot[np.arange(B), y] = -1.0 / B
    return (log_softmax(logits) * Tensor(onehot)).sum()


def nll_from_probs(probs: Tensor, labels) -> Tensor:
    """Mean -log p[label] for rows that are already probabilities."""
    B, M = probs.shape
    y = _labels(labels, B, M)
    onehot = np.zeros((B, M))
    onehot[np.arange(B), y] = -1.0 / B
    return (log(clamp(probs, 1e-300, 1.0)) * Tensor(onehot)).sum()


P_EPS = 1e-7


def binary_cross_entropy(p: Tensor, targets) -> Tensor:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"targets {t.shape} vs probabilities {p.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary targets must be 0 or 1")
    q = clamp(p, P_EPS, 1 - P_EPS)
    n = t.size
    pos = log(q) * Tensor(-t / n)
    negl = log(1.0 - q) * Tensor(-(1 - t) / n)
    return pos.sum() + negl.sum()


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: dict[str, Tensor], state: SgdState, allow_missing: bool = False) -> None:
    """v <- momentum*v + grad; p <- p - lr*v; then clear grads.

    Parameters without a gradient raise unless ``allow_missing``; in that
    case they are treated as having zero gradient (velocity still decays).
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            if not allow_missing:
                raise ValueError(f"parameter {name} has no gradient")
            g = np.zeros_like(p.data)
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.lr * v
        p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def mean_rows(x: Tensor) -> Tensor:
    return reduce_mean(x, axis=0, keepdims=True)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
