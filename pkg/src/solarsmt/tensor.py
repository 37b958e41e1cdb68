"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Only the operations the SMT forward pass needs are provided. Operations are
recorded onto the active :class:`Graph` (entered with ``with Graph() as g``);
outside a graph, operations run eagerly without recording, which is how
inference avoids bookkeeping.

Broadcasting is limited to adding a tensor whose shape equals the trailing
dimensions of the other operand (bias-add over leading dimensions). Any other
shape mismatch raises :class:`DimensionError`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ContractError",
    "DimensionError",
    "Graph",
    "Tensor",
    "add",
    "backward",
    "broadcast_batch",
    "concat",
    "gelu",
    "layer_norm",
    "matmul",
    "mse_loss",
    "mul",
    "reshape",
    "scale",
    "select",
    "softmax_lastdim",
    "square",
    "sum_all",
    "transpose",
]

_ids = itertools.count()
_active: list["Graph"] = []

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for tests and interactive use
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))


@dataclass
class OpRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered record of operations executed while the graph is active."""

    records: list[OpRecord] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def zero_grad(self) -> None:
        for rec in self.records:
            rec.output.grad = None
            for t in rec.inputs:
                t.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, bw) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs and _active:
        _active[-1].records.append(OpRecord(op, inputs, out, bw))
    return out


def _sum_to_trailing(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead == 0:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``. ``b`` is either ``(k, n)`` (shared across the
    leading dimensions of ``a``) or ``(..., k, n)`` with leading dimensions
    identical to ``a``'s.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.values.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing dimensions of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if b.values.ndim > a.values.ndim or a.shape[a.values.ndim - b.values.ndim:] != b.shape:
            raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    bshape = b.shape

    def bw(g):
        return g, _sum_to_trailing(g, bshape)

    return _emit("add", (a, b), a.values + b.values, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _emit("scale", (x,), x.values * c, lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    return _emit("square", (x,), xv * xv, lambda g: (2.0 * xv * g,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.values.sum()), lambda g: (np.full(shape, g, dtype=g.dtype),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.values, axes), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", parts, np.concatenate([p.values for p in parts], axis=axis), bw)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Take one position along ``axis`` (dropping that axis)."""
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _emit("select", (x,), np.take(x.values, index, axis=axis), bw)


def broadcast_batch(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat ``x`` over new leading dimensions ``lead``."""
    x = _as_tensor(x)
    shape = x.shape
    out = np.broadcast_to(x.values, tuple(lead) + shape).copy()
    return _emit("broadcast", (x,), out, lambda g: (_sum_to_trailing(g, shape),))


def softmax_lastdim(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs feature dim {d}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gamma.values

    def bw(g):
        gx_hat = g * gv
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = _sum_to_trailing(g * xhat, (d,))
        gbeta = _sum_to_trailing(g, (d,))
        return gx, ggamma, gbeta

    return _emit("layer_norm", (x, gamma, beta), xhat * gv + beta.values, bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = _as_tensor(x)
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _emit("gelu", (x,), xv * cdf, bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Batch mean of squared errors."""
    pred = _as_tensor(pred)
    tv = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tv.shape or pred.values.ndim != 1 or pred.shape[0] < 1:
        raise DimensionError(f"mse_loss needs equal-length vectors, got {pred.shape} and {tv.shape}")
    diff = pred.values - tv
    n = diff.shape[0]
    return _emit("mse", (pred,), np.asarray((diff * diff).sum() / n), lambda g: (g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``.grad`` on every tensor of ``graph`` that ``loss`` depends on.

    Gradients accumulate, so clear them (``graph.zero_grad()``) between passes.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.values)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for rec in reversed(graph.records):
        g = rec.output.grad
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
            else:
                inp.grad += gi
