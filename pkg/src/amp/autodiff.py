"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable op appends a record to the thread's active
:class:`Tape`. :func:`backward` replays the tape in reverse, accumulates
gradients into leaf tensors (``Parameter.grad`` accumulates across calls
until :meth:`Parameter.zero_grad`), and frees the tape.

Tensors are vectors or matrices. Binary elementwise ops accept equal shapes
or a 1-element operand, which is broadcast; nothing else is broadcast.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from amp import kernels


class ShapeError(ValueError):
    pass


class DomainError(ArithmeticError):
    def __init__(self, message: str, index: tuple[int, ...]):
        super().__init__(f"{message} at index {index}")
        self.index = index


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are 1-D or 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce("mean", self, axis)


class Parameter(Tensor):
    """A learnable leaf tensor. Its identifier is the ``name``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class Record:
    kind: str
    parents: tuple[Tensor, ...]
    parent_nodes: tuple[int | None, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def push(self, kind, parents, out, backward) -> None:
        nodes = tuple(p._node if p._tape is self else None for p in parents)
        out._tape = self
        out._node = len(self.records)
        self.records.append(Record(kind, tuple(parents), nodes, out, backward))

    def free(self) -> None:
        for rec in self.records:
            rec.out._tape = None
            rec.out._node = None
        self.records.clear()


_state = threading.local()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def reset_tape() -> None:
    """Drop whatever the current thread has recorded."""
    current_tape().free()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().push(kind, parents, out, backward)
    return out


def _first_index(mask: np.ndarray) -> tuple[int, ...]:
    flat = int(np.flatnonzero(mask)[0])
    return tuple(int(i) for i in np.unravel_index(flat, mask.shape))


def _fit_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array(g.sum()).reshape(shape)


def _binary_operands(a: Tensor, b: Tensor):
    x, y = a.data, b.data
    if x.shape == y.shape:
        return x, y, x.shape
    if y.size == 1:
        return x, y.reshape(()), x.shape
    if x.size == 1:
        return x.reshape(()), y, y.shape
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only 1-element operands broadcast)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y, shape = _binary_operands(a, b)
    out = np.add(x, y).reshape(shape)
    return _record("add", out, (a, b), lambda g: (_fit_shape(g, a.shape), _fit_shape(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y, shape = _binary_operands(a, b)
    out = np.subtract(x, y).reshape(shape)
    return _record("sub", out, (a, b), lambda g: (_fit_shape(g, a.shape), _fit_shape(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y, shape = _binary_operands(a, b)
    out = np.multiply(x, y).reshape(shape)
    return _record("mul", out, (a, b), lambda g: (_fit_shape(g * y, a.shape), _fit_shape(g * x, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y, shape = _binary_operands(a, b)
    if np.any(y == 0.0):
        raise DomainError("division by zero", _first_index(b.data == 0.0))
    out = np.divide(x, y).reshape(shape)
    return _record(
        "div", out, (a, b),
        lambda g: (_fit_shape(g / y, a.shape), _fit_shape(-g * x / (y * y), b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0.0):
        raise DomainError("log of negative value", _first_index(x < 0.0))
    with np.errstate(divide="ignore"):
        out = np.log(x)
    return _record("log", out, (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient 0 at the kink
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * x * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0.0):
        raise DomainError("sqrt of negative value", _first_index(x < 0.0))
    out = np.sqrt(x)
    return _record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("erf", special.erf(x), (a,), lambda g: (g * _TWO_OVER_SQRT_PI * np.exp(-x * x),))


def erf_diff(lo, hi) -> Tensor:
    """``erf(hi) - erf(lo)`` without cancellation in either tail."""
    lo, hi = as_tensor(lo), as_tensor(hi)
    if lo.shape != hi.shape:
        raise ShapeError(f"erf_diff needs equal shapes, got {lo.shape} and {hi.shape}")
    x0, x1 = lo.data, hi.data
    right = x0 >= 0.0
    left = x1 <= 0.0
    out = special.erf(x1) - special.erf(x0)
    out = np.where(right, special.erfc(x0) - special.erfc(x1), out)
    out = np.where(left, special.erfc(-x1) - special.erfc(-x0), out)

    def backward(g):
        return (-g * _TWO_OVER_SQRT_PI * np.exp(-x0 * x0), g * _TWO_OVER_SQRT_PI * np.exp(-x1 * x1))

    return _record("erf_diff", out, (lo, hi), backward)


def xlogx(a) -> Tensor:
    """``a * ln(a)`` with the 0 * ln 0 = 0 convention."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0.0):
        raise DomainError("xlogx of negative value", _first_index(x < 0.0))
    safe = np.maximum(x, np.finfo(np.float64).tiny)
    out = np.where(x > 0.0, x * np.log(safe), 0.0)
    return _record("xlogx", out, (a,), lambda g: (g * (np.log(safe) + 1.0),))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "square": square, "sqrt": sqrt,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind not in ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {kind!r}")
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return ELEMENTWISE[kind](a, b)
    return ELEMENTWISE[kind](a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _record("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.reshape(shape)
    if out.ndim not in (1, 2):
        raise ShapeError(f"cannot reshape to {shape}")
    return _record("reshape", out.copy(), (a,), lambda g: (g.reshape(src),))


def add_bias(a, b) -> Tensor:
    """Add a length-k vector to every row of an m x k matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch {a.shape} + {b.shape}")
    return _record("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def reduce(kind: str, a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {kind!r}")
    shape = a.shape
    if axis is None:
        count = a.size
        total = a.data.sum()
        out = np.array([total / count if kind == "mean" else total])

        def backward(g):
            scale = g[0] / count if kind == "mean" else g[0]
            return (np.full(shape, scale),)

        return _record(kind, out, (a,), backward)
    if axis < 0 or axis >= a.ndim:
        raise ShapeError(f"invalid axis {axis} for shape {shape}")
    count = shape[axis]
    out = a.data.sum(axis=axis)
    if kind == "mean":
        out = out / count
    if out.ndim == 0:
        out = out.reshape(1)

    def backward(g):
        gg = g / count if kind == "mean" else g
        if a.ndim == 1:
            return (np.full(shape, gg[0]),)
        return (np.broadcast_to(np.expand_dims(gg, axis), shape).copy(),)

    return _record(kind, out, (a,), backward)


def scale_rows(a, weights) -> Tensor:
    """Multiply row i of a matrix by the constant ``weights[i]``."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if a.ndim != 2 or w.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows needs {a.shape[0] if a.ndim == 2 else '?'} weights, got {w.shape[0]}")
    return _record("scale_rows", a.data * w, (a,), lambda g: (g * w,))


def sum_squares(tensors: Sequence) -> Tensor:
    """Total squared entries of several tensors, as one tape record."""
    tensors = [as_tensor(t) for t in tensors]
    total = np.array([sum(float(np.dot(t.data.ravel(), t.data.ravel())) for t in tensors)])
    return _record("sum_squares", total, tensors, lambda g: tuple(2.0 * g[0] * t.data for t in tensors))


def gather(a, index) -> Tensor:
    """Select entries of a vector or rows of a matrix."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    out = kernels.gather_rows(a.data, idx)
    return _record("gather", out, (a,), lambda g: (kernels.scatter_add(g, idx, n),))


def scatter_aggregate(messages, destinations, n: int, kind: str = "sum") -> Tensor:
    """Aggregate message rows into ``n`` node rows by destination index."""
    messages = as_tensor(messages)
    dest = np.asarray(destinations, dtype=np.int64).reshape(-1)
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown aggregation {kind!r}")
    if messages.ndim != 2:
        raise ShapeError(f"messages must be a matrix, got shape {messages.shape}")
    if dest.shape[0] != messages.shape[0]:
        raise ShapeError(f"{dest.shape[0]} destinations for {messages.shape[0]} messages")
    if dest.size and (dest.min() < 0 or dest.max() >= n):
        raise IndexError(f"destination index out of range for {n} nodes")
    out = kernels.scatter_add(messages.data, dest, n)
    if kind == "mean":
        counts = np.maximum(np.bincount(dest, minlength=n), 1).astype(np.float64)[:, None]
        out = out / counts
        return _record(
            "scatter_mean", out, (messages,),
            lambda g: (kernels.gather_rows(g / counts, dest),),
        )
    return _record("scatter_sum", out, (messages,), lambda g: (kernels.gather_rows(g, dest),))


def propagate(values, src, dst, n: int, weights=None) -> Tensor:
    """Edge-wise message passing: row v sums ``weights[e] * values[src[e]]`` over ``dst[e] == v``.

    Equivalent to gather, scale_rows and scatter_aggregate without the
    per-edge intermediate.
    """
    values = as_tensor(values)
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    dst = np.asarray(dst, dtype=np.int64).reshape(-1)
    if values.ndim != 2:
        raise ShapeError(f"values must be a matrix, got shape {values.shape}")
    if src.shape != dst.shape or (weights is not None and np.shape(weights) != src.shape):
        raise ShapeError("src, dst and weights must have one entry per edge")
    m = values.shape[0]
    if src.size and (src.min() < 0 or src.max() >= m or dst.min() < 0 or dst.max() >= n):
        raise IndexError("edge endpoint out of range")
    out = kernels.propagate(values.data, src, dst, n, weights)
    return _record("propagate", out, (values,), lambda g: (kernels.propagate(g, dst, src, m, weights),))


def _replay(root: Tensor, seed: np.ndarray) -> None:
    tape = root._tape
    if tape is None or root._node is None:
        if root.requires_grad and root._tape is None and root._node is None:
            root.grad = seed.copy() if root.grad is None else root.grad + seed
        return
    pending: dict[int, np.ndarray] = {root._node: seed}
    for idx in range(root._node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        rec = tape.records[idx]
        for parent, node, pg in zip(rec.parents, rec.parent_nodes, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if node is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
            else:
                prev = pending.get(node)
                pending[node] = pg if prev is None else prev + pg


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    _replay(loss, np.ones_like(loss.data))
    if tape is not None and not retain_tape:
        tape.free()


def vjp(output: Tensor, seed: np.ndarray) -> None:
    """Vector-Jacobian product into leaf grads; the tape is kept for reuse."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
    _replay(output, seed)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_discrepancy(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise relative error; entries far below the largest
    gradient magnitude are judged against that magnitude instead."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("nan")
    floor = 1e-6 * (1.0 + np.max(np.abs(numeric)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-6) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    out = np.zeros_like(point)
    with no_grad():
        for idx in np.ndindex(point.shape):
            orig = point[idx]
            point[idx] = orig + h
            hi = f(Tensor(point)).item()
            point[idx] = orig - h
            lo = f(Tensor(point)).item()
            point[idx] = orig
            out[idx] = (hi - lo) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, tolerance: float = 1e-6, h: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``point`` with central differences.

    At non-differentiable points (relu at exactly 0) the tape reports the
    subgradient 0 while finite differences see the average slope, so the
    check is expected to fail there.
    """
    x = Tensor(point, requires_grad=True)
    y = f(x)
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numeric_grad(f, x.data, h)
    return GradCheckReport(relative_discrepancy(analytic, numeric), tolerance, analytic, numeric)
