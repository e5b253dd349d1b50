"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in a numpy array (row-major). Every op that touches a tensor
with ``requires_grad`` records its parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order.

Broadcasting is restricted to same-rank operands whose mismatched axes have
size 1 on one side, so the backward reduction is never ambiguous.
"""

from __future__ import annotations

import contextlib
import logging
import os
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("RECEM_DEBUG", "") not in ("", "0")

_GRAD_ENABLED = True

# relu/l1 inputs closer than this to 0 during a gradient check count as kinks
_kink_tol: float | None = None
_kink_hits = 0


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no autodiff records inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Scan every op output for NaN/Inf while active."""
    global DEBUG
    prev, DEBUG = DEBUG, enabled
    try:
        yield
    finally:
        DEBUG = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if DEBUG and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from op {op!r}")
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- autodiff ----------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_tensor(shape: Sequence[int], data: Sequence[float] | np.ndarray, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"shape must be non-empty with positive dims, got {shape}")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"data length {flat.size} does not match shape {shape}")
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("tensor data contains NaN or Inf")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ---------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data + float(c), (a,), lambda g: (g,), "add_const")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _note_kinks(x: np.ndarray) -> None:
    global _kink_hits
    if _kink_tol is not None:
        _kink_hits += int(np.count_nonzero(np.abs(x) < _kink_tol))


def relu(a: Tensor) -> Tensor:
    _note_kinks(a.data)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input was inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return Tensor._make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new = a.data.reshape(tuple(shape))
    old = a.shape
    return Tensor._make(new, (a,), lambda g: (g.reshape(old),), "reshape")


# -- reductions ----------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for rank {a.ndim}")
    return axis % a.ndim


def _expand_grad(g: np.ndarray, a: Tensor, axis: int | None, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape(()), a.shape)
    if not keepdims:
        reduced = a.shape[:axis] + a.shape[axis + 1:]
        g = np.expand_dims(g.reshape(reduced), axis)
    return np.broadcast_to(g, a.shape)


def _shaped(out, a: Tensor, axis: int | None, keepdims: bool) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if axis is None and keepdims:
        return out.reshape((1,) * a.ndim)
    return out.reshape(np.shape(out) or (1,))


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(a, axis)
    out = a.data.sum() if axis is None else a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._make(_shaped(out, a, axis, keepdims), (a,),
                        lambda g: (_expand_grad(g, a, axis, keepdims),), "sum")


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean() if axis is None else a.data.mean(axis=axis, keepdims=keepdims)
    return Tensor._make(_shaped(out, a, axis, keepdims), (a,),
                        lambda g: (_expand_grad(g, a, axis, keepdims) / n,), "mean")


def l1_norm(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum of absolute values; the subgradient at 0 is taken as 0."""
    axis = _check_axis(a, axis)
    _note_kinks(a.data)
    sign = np.sign(a.data)
    absval = np.abs(a.data)
    out = absval.sum() if axis is None else absval.sum(axis=axis, keepdims=keepdims)
    return Tensor._make(_shaped(out, a, axis, keepdims), (a,),
                        lambda g: (_expand_grad(g, a, axis, keepdims) * sign,), "l1_norm")


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    try:
        fn = {"sum": reduce_sum, "mean": reduce_mean, "l1_norm": l1_norm}[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(a, axis)


# -- structural ----------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    ref = tensors[0]
    axis = _check_axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)] if t.requires_grad else None)
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tuple(tensors), backward, "concat")


def slice_(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _check_axis(t, axis)
    if not 0 <= start < stop <= t.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {t.shape[axis]}")
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        return (full,)

    return Tensor._make(t.data[idx].copy(), (t,), backward, "slice")


# -- softmax family ------------------------------------------------------------------


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2-d tensor."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return Tensor._make(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor._make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def elementwise(op: str, a: Tensor, b: "Tensor | float | None" = None) -> Tensor:
    """Dispatch by name; mirrors the op table used in tests and docs."""
    if op in ("sigmoid", "relu", "neg"):
        return {"sigmoid": sigmoid, "relu": relu, "neg": neg}[op](a)
    if op == "scale_by_const":
        return scale(a, float(b))
    if op in ("add", "sub", "mul"):
        if not isinstance(b, Tensor):
            raise TypeError(f"{op} needs a tensor operand")
        return {"add": add, "sub": sub, "mul": mul}[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- gradient checking ---------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_resamples: int = 20,
    info: dict | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    Coordinates of ``x`` sitting on a kink (relu / l1 input within 2*eps of
    zero) are redrawn from N(0, 1); if an internal kink is hit the whole
    point is redrawn. The number of redraws goes into ``info['resampled']``.
    """
    global _kink_tol, _kink_hits
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    resampled = 0
    for _ in range(max_resamples + 1):
        near = np.abs(x0) < 2 * eps
        if near.any():
            x0[near] = rng.standard_normal(int(near.sum()))
            resampled += int(near.sum())
            continue
        _kink_tol, _kink_hits = 2 * eps, 0
        try:
            xt = Tensor(x0.copy(), requires_grad=True)
            out = f(xt)
            if out.data.size != 1:
                raise ShapeError("grad_check needs a scalar-valued function")
            out.backward()
            analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)
            numeric = np.zeros_like(x0)
            flat = x0.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(Tensor(x0)).item()
                flat[i] = orig - eps
                fm = f(Tensor(x0)).item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            hits = _kink_hits
        finally:
            _kink_tol = None
        if hits:
            x0 = rng.standard_normal(x0.shape)
            resampled += x0.size
            continue
        break
    else:
        raise RuntimeError("grad_check could not find a kink-free point")
    if resampled:
        logger.info("grad_check resampled %d coordinates", resampled)
    if info is not None:
        info["resampled"] = resampled
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
