"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires gradients the
result remembers its parents and a closure that maps the output gradient to
input gradients.  Nodes receive a monotonically increasing id at creation, so
sorting reachable nodes by id is a valid topological order and the backward
sweep simply walks it in reverse.

A graph can be differentiated once.  Calling ``backward`` again on a loss (or
through any interior node already consumed) raises :class:`GraphError`; run
the forward computation again instead.
"""

from __future__ import annotations

import builtins
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DomainError",
    "ShapeError",
    "NumericError",
    "GraphError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "neg",
    "square",
    "sum",
    "mean",
    "max",
    "broadcast_to",
    "reshape",
    "transpose",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "logsumexp",
    "gather_rows",
    "cumsum",
    "avg_filter2d",
    "box_filter_matrix",
    "backward",
    "graph_dump",
    "finite_difference_check",
    "GradCheck",
]


class DomainError(ValueError):
    """An op was applied outside its mathematical domain (log of x <= 0, x / 0)."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


class GraphError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, repeated backward)."""


_ids = itertools.count()
_CONSUMED = object()


class Tensor:
    """A float64 array that may take part in a gradient graph.

    Leaves are created directly; interior nodes come from the op functions in
    this module.  ``grad`` is ``None`` until a backward pass reaches the
    tensor, after which it holds an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, leaves: Iterable["Tensor"] | None = None) -> None:
        backward(self, leaves)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # Operator sugar; each forwards to the module-level op.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _scalar_error():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    """Wrap arrays and Python numbers as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.parents = parents if needs else ()
    out._backward = backward_fn if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------------------
# Elementwise binary ops
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


# ----------------------------------------------------------------------------
# Elementwise unary ops
# ----------------------------------------------------------------------------


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, "neg", (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0.0
    return _make(np.where(pos, x.data, 0.0), "relu", (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # Split by sign so neither branch overflows.
    ez = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


# ----------------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    return _make(
        np.asarray(x.data.sum(axis=axes, keepdims=keepdims)),
        "sum",
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims),),
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = 1
    for a in axes:
        count *= shape[a]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return _make(
        np.asarray(x.data.mean(axis=axes, keepdims=keepdims)),
        "mean",
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,),
    )


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max-reduce.  Tied maxima share the incoming gradient equally."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    m = xd.max(axis=axes, keepdims=True)
    hit = (xd == m).astype(np.float64)
    hit /= hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)
    shape = x.shape
    return _make(
        np.asarray(out),
        "max",
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) * hit,),
    )


def logsumexp(x, axis=-1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(x))) along ``axis``."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    m = xd.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(xd - m).sum(axis=axes, keepdims=True)) + m
    out = lse if keepdims else np.squeeze(lse, axis=axes)
    shape = x.shape

    def bw(g):
        return (_expand_reduced(g, shape, axes, keepdims) * np.exp(xd - lse),)

    return _make(np.asarray(out), "logsumexp", (x,), bw)


# ----------------------------------------------------------------------------
# Row-wise normalisers
# ----------------------------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax along the last axis (each row sums to one)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), bw)


# ----------------------------------------------------------------------------
# Shape ops
# ----------------------------------------------------------------------------


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from exc
    src = x.shape
    return _make(out, "broadcast", (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {shape}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose needs at least 2 dimensions")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes),
        "transpose",
        (x,),
        lambda g: (np.transpose(g, inv),),
    )


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, "concat", xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(x, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` (default: rows) by integer index."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for axis of size {n}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (gx,)

    return _make(np.take(x.data, idx, axis=axis), "gather_rows", (x,), bw)


def cumsum(x, axis: int = 0) -> Tensor:
    """Cumulative sum; along axis 0 of a matrix this accumulates rows."""
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), "cumsum", (x,), bw)


# ----------------------------------------------------------------------------
# Average filter
# ----------------------------------------------------------------------------

_PADDINGS = ("zero", "reflect", "edge")


@lru_cache(maxsize=64)
def _box_matrix(n: int, window: int, padding: str) -> np.ndarray:
    r = window // 2
    if padding == "reflect" and r >= n:
        raise ShapeError(f"reflect padding needs window//2 < size ({window} vs {n})")
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i - r, i + r + 1):
            if 0 <= j < n:
                src = j
            elif padding == "zero":
                continue
            elif padding == "edge":
                src = min(builtins.max(j, 0), n - 1)
            else:  # reflect, edge excluded: ... c b | a b c | b a ...
                src = -j if j < 0 else 2 * (n - 1) - j
            mat[i, src] += 1.0 / window
    mat.setflags(write=False)
    return mat


def box_filter_matrix(n: int, window: int, padding: str = "zero") -> np.ndarray:
    """1-D averaging operator of size ``n``; the 2-D filter is its outer product."""
    if padding not in _PADDINGS:
        raise ValueError(f"padding must be one of {_PADDINGS}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    return _box_matrix(n, window, padding)


def avg_filter2d(x, window: int = 3, padding: str = "zero") -> Tensor:
    """Box average over the last two axes.

    ``padding`` is ``"zero"`` (divide by the full window, borders darken),
    ``"reflect"`` (mirror without repeating the edge) or ``"edge"``
    (replicate the border pixel).  The filter is separable, so it is applied
    as ``Ry @ X @ Rx^T`` with cached 1-D operators.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("avg_filter2d needs at least 2 dimensions")
    h, w = x.shape[-2:]
    if window > builtins.max(h, w) and padding != "zero":
        raise ShapeError("window larger than image")
    ry = box_filter_matrix(h, window, padding)
    rx = box_filter_matrix(w, window, padding)
    out = ry @ x.data @ rx.T
    return _make(out, "avg_filter2d", (x,), lambda g: (ry.T @ g @ rx,))


# ----------------------------------------------------------------------------
# Backward pass
# ----------------------------------------------------------------------------


def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        nodes.append(node)
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append(p)
    nodes.sort(key=lambda n: n.id, reverse=True)
    return nodes


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves``, when given, are guaranteed a gradient afterwards: leaves the
    loss does not depend on receive zeros instead of staying ``None``.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.requires_grad:
        nodes = _collect(loss)
        for node in nodes:
            if node._backward is _CONSUMED:
                raise GraphError("graph already differentiated; recompute the forward pass")
        grads = {loss.id: np.ones_like(loss.data)}
        for node in nodes:
            g = grads.pop(node.id, None)
            if node._backward is None:
                if g is not None:
                    g = np.array(g, dtype=np.float64).reshape(node.shape)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            fn = node._backward
            node._backward = _CONSUMED
            if g is None:
                continue
            for parent, pg in zip(node.parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def graph_dump(root: Tensor) -> str:
    """One line per node reachable from ``root``: id, op, parent ids, shape."""
    lines = []
    for node in reversed(_collect(root)):
        parents = ",".join(str(p.id) for p in node.parents)
        lines.append(f"{node.id}\t{node.op}\t[{parents}]\t{node.shape}")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    max_abs_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __float__(self) -> float:
        return self.max_rel_error


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    tol: float = 1e-4,
    eps: float = 1e-8,
) -> GradCheck:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The error per coordinate is ``|analytic - numeric| / (|numeric| + eps)``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    backward(out, [xt])
    analytic = xt.grad.reshape(-1)

    def value(arr):
        v = f(Tensor(arr)).data
        if v.size != 1 or not np.isfinite(v).all():
            raise NumericError("finite-difference evaluation is not a finite scalar")
        return float(v.reshape(-1)[0])

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        numeric[i] = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / (2.0 * h)
    abs_err = np.abs(analytic - numeric)
    rel = abs_err / (np.abs(numeric) + eps)
    return GradCheck(
        float(rel.max()) if rel.size else 0.0,
        float(abs_err.max()) if abs_err.size else 0.0,
        tol,
    )
