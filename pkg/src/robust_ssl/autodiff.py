"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation records a node holding references to its
parents and a vector-Jacobian product (VJP) closure. VJPs are written with
the same Tensor operations, so running a backward pass with
``create_graph=True`` records the backward computation itself and the
resulting gradients can be differentiated again (Hessian-vector products,
mixed second derivatives, differentiating through unrolled SGD steps).

Node ids come from a monotonically increasing counter, so a parent always
has a smaller id than its children. The backward pass processes reachable
nodes in decreasing id order, which is a valid reverse topological order
and touches each node exactly once.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "tensor",
    "constant",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "hessian_vector_product",
    "mixed_second_derivative_vector_product",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "standardize",
    "exp",
    "log",
    "tanh",
    "relu",
    "sqrt",
    "power",
    "maximum",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "reshape",
    "transpose",
    "take",
    "concatenate",
    "where",
]

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's mathematical domain."""


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def enable_grad(flag: bool = True):
    prev = is_grad_enabled()
    _local.enabled = flag
    try:
        yield
    finally:
        _local.enabled = prev


def no_grad():
    return enable_grad(False)


class Tensor:
    """A float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        self._id = next(_ids) if requires_grad else 0

    # construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        t._id = 0
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return self._id or None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        """Turn this tensor into a fresh leaf of the graph."""
        self.requires_grad = flag
        self._parents = ()
        self._vjp = None
        self._id = next(_ids) if flag else 0
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar -------------------------------------------------------

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _local.__dict__.get("enabled", True):
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._vjp = vjp
                out._id = next(_ids)
                break
    return out


def _check_finite_domain(name: str, x: np.ndarray, strict: bool) -> None:
    bad = x <= 0 if strict else x < 0
    if bad.any():
        raise DomainError(f"{name} of negative input (min {x.min()!r})")


# broadcasting -------------------------------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or not sb:
        return sa
    if not sa:
        return sb
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def _np_sum_to(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1)
    return a.sum(axis=axes, keepdims=True).reshape(shape) if axes else a.reshape(shape)


def _plain() -> bool:
    """True while a backward pass runs without recording (numpy fast paths apply)."""
    return not _local.__dict__.get("enabled", True)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g):
        if _plain():
            return (Tensor._wrap(np.broadcast_to(g.data, src_shape)),)
        return (broadcast_to(g, src_shape),)

    return _record(data.reshape(shape), (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    src_shape = x.shape

    def vjp(g):
        if _plain():
            return (Tensor._wrap(_np_sum_to(g.data, src_shape)),)
        return (sum_to(g, src_shape),)

    return _record(data, (x,), vjp)


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        if _plain():
            return (Tensor._wrap(_np_sum_to(g.data, a.shape)) if a.requires_grad else None,
                    Tensor._wrap(_np_sum_to(g.data, b.shape)) if b.requires_grad else None)
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        if _plain():
            return (Tensor._wrap(_np_sum_to(g.data, a.shape)) if a.requires_grad else None,
                    Tensor._wrap(_np_sum_to(-g.data, b.shape)) if b.requires_grad else None)
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def vjp(g):
        if _plain():
            return (Tensor._wrap(_np_sum_to(g.data * b.data, a.shape)) if a.requires_grad else None,
                    Tensor._wrap(_np_sum_to(g.data * a.data, b.shape)) if b.requires_grad else None)
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    if not np.all(b.data):
        raise DomainError("division by zero")

    def vjp(g):
        if _plain():
            q = g.data / b.data
            return (Tensor._wrap(_np_sum_to(q, a.shape)) if a.requires_grad else None,
                    Tensor._wrap(_np_sum_to(-q * a.data / b.data, b.shape))
                    if b.requires_grad else None)
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record(a.data / b.data, (a, b), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    mask = (a.data >= b.data).astype(np.float64)

    def vjp(g):
        ma = Tensor._wrap(mask)
        return (sum_to(mul(g, ma), a.shape) if a.requires_grad else None,
                sum_to(mul(g, Tensor._wrap(1.0 - mask)), b.shape) if b.requires_grad else None)

    return _record(np.maximum(a.data, b.data), (a, b), vjp)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``; cond is constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(cond, dtype=bool)
    fmask = mask.astype(np.float64)

    def vjp(g):
        return (sum_to(mul(g, Tensor._wrap(fmask)), a.shape) if a.requires_grad else None,
                sum_to(mul(g, Tensor._wrap(1.0 - fmask)), b.shape) if b.requires_grad else None)

    return _record(np.where(mask, a.data, b.data), (a, b), vjp)


# elementwise unary --------------------------------------------------------


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record(-x.data, (x,),
                   lambda g: (Tensor._wrap(-g.data),) if _plain() else (neg(g),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        if _plain():
            return (Tensor._wrap(g.data * out),)
        return (mul(g, exp(x)),)

    return _record(out, (x,), vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite_domain("log", x.data, strict=False)
    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return _record(out, (x,), lambda g: (div(g, x),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        if is_grad_enabled():
            y = tanh(x)
            return (mul(g, sub(1.0, mul(y, y))),)
        return (Tensor._wrap(g.data * (1.0 - out * out)),)

    return _record(out, (x,), vjp)


def relu(x) -> Tensor:
    """max(x, 0); the derivative at 0 and the second derivative are taken as 0."""
    x = _as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return _record(x.data * mask, (x,), lambda g: (mul(g, Tensor._wrap(mask)),))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite_domain("sqrt", x.data, strict=False)
    out = np.sqrt(x.data)

    def vjp(g):
        y = sqrt(x) if is_grad_enabled() else Tensor._wrap(out)
        return (div(g, mul(2.0, y)),)

    return _record(out, (x,), vjp)


def power(x, p: float) -> Tensor:
    """Raise to a constant real exponent."""
    x = _as_tensor(x)
    p = float(p)
    if p != int(p):
        _check_finite_domain("power", x.data, strict=False)
    out = x.data ** p

    def vjp(g):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, mul(2.0, x)),)
        return (mul(g, mul(p, power(x, p - 1.0))),)

    return _record(out, (x,), vjp)


# reductions and normalizers -----------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    src_shape = x.shape

    def vjp(g):
        if not keepdims and ax is not None:
            kshape = tuple(1 if i in ax else n for i, n in enumerate(src_shape))
            if _plain():
                return (Tensor._wrap(np.broadcast_to(g.data.reshape(kshape), src_shape)),)
            g = reshape(g, kshape)
        if _plain():
            return (Tensor._wrap(np.broadcast_to(g.data, src_shape)),)
        return (broadcast_to(g, src_shape),)

    return _record(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return mul(sum(x, ax, keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        y = softmax(x, axis) if is_grad_enabled() else Tensor._wrap(out)
        gy = mul(g, y)
        return (sub(gy, mul(y, sum(gy, axis, keepdims=True))),)

    return _record(out, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        y = softmax(x, axis) if is_grad_enabled() else Tensor._wrap(np.exp(out))
        return (sub(g, mul(y, sum(g, axis, keepdims=True))),)

    return _record(out, (x,), vjp)


# linear algebra and shape -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        if _plain():
            return (Tensor._wrap(g.data @ b.data.T) if a.requires_grad else None,
                    Tensor._wrap(a.data.T @ g.data) if b.requires_grad else None)
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)

    return _record(a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as a single node."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match output width {weight.shape[1]}")

    def vjp(g):
        if _plain():
            return (Tensor._wrap(g.data @ weight.data.T) if x.requires_grad else None,
                    Tensor._wrap(x.data.T @ g.data) if weight.requires_grad else None,
                    Tensor._wrap(g.data.sum(axis=0)) if bias.requires_grad else None)
        return (matmul(g, transpose(weight)) if x.requires_grad else None,
                matmul(transpose(x), g) if weight.requires_grad else None,
                sum(g, axis=0) if bias.requires_grad else None)

    return _record(x.data @ weight.data + bias.data, (x, weight, bias), vjp)


def _moments_np(x: np.ndarray, w: np.ndarray):
    total = w.sum()
    mu = (w @ x) / total
    c = x - mu
    var = (w @ (c * c)) / total
    return total, c, var


def standardize(x, w=None, eps: float = 1e-5) -> Tensor:
    """Rows of ``x`` centered and scaled by their (optionally weighted) moments.

    With per-row weights ``w`` the mean and biased variance are weighted
    averages, and the result is differentiable in ``w`` as well. Rows with
    zero weight are standardized without contributing to the moments.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"standardize expects a matrix, got shape {x.shape}")
    m = x.shape[0]
    w = Tensor._wrap(np.ones(m)) if w is None else _as_tensor(w)
    if w.shape != (m,):
        raise ShapeError(f"expected {m} row weights, got shape {w.shape}")
    if not w.data.sum() > 0:
        raise DomainError("row weights must have a positive sum")
    total, c, var = _moments_np(x.data, w.data)
    r = 1.0 / np.sqrt(var + eps)
    xhat = c * r

    def vjp(g):
        if is_grad_enabled():
            # rebuild the moments from recorded ops so the result is differentiable again
            tot = sum(w)
            wcol = reshape(w, (m, 1))
            cen = sub(x, div(sum(mul(wcol, x), axis=0), tot))
            v = div(sum(mul(wcol, mul(cen, cen)), axis=0), tot)
            rr = power(add(v, eps), -0.5)
            xh = mul(cen, rr)
            a = sum(g, axis=0)
            b = sum(mul(g, xh), axis=0)
            ws = reshape(div(w, tot), (m, 1))
            gx = None
            if x.requires_grad:
                gx = mul(rr, sub(sub(g, mul(ws, a)), mul(xh, mul(ws, b))))
            gw = None
            if w.requires_grad:
                q = mul(v, mul(rr, rr))
                inner = add(mul(xh, a), mul(0.5, mul(sub(mul(xh, xh), q), b)))
                gw = neg(div(sum(inner, axis=1), tot))
            return gx, gw
        gd = g.data
        a = gd.sum(axis=0)
        b = (gd * xhat).sum(axis=0)
        ws = (w.data / total)[:, None]
        gx = Tensor._wrap(r * (gd - ws * a - xhat * ws * b)) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            q = var * r * r
            gw = Tensor._wrap(-(xhat * a + 0.5 * (xhat * xhat - q) * b).sum(axis=1) / total)
        return gx, gw

    return _record(xhat, (x, w), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _record(x.data.T, (x,),
                   lambda g: (Tensor._wrap(g.data.T),) if _plain() else (transpose(g),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src_shape = x.shape
    return _record(out, (x,), lambda g: (Tensor._wrap(g.data.reshape(src_shape)),)
                   if _plain() else (reshape(g, src_shape),))


def _is_basic_index(index) -> bool:
    if isinstance(index, (int, slice)):
        return True
    if isinstance(index, tuple):
        return all(isinstance(i, (int, slice)) for i in index)
    return False


def _scatter(g, index, shape) -> Tensor:
    """Adjoint of ``take``: accumulate ``g`` into zeros of ``shape`` at ``index``."""
    data = np.zeros(shape)
    if _is_basic_index(index):
        data[index] = g.data
    else:
        np.add.at(data, index, g.data)
    return _record(data, (g,), lambda gg: (Tensor._wrap(np.array(gg.data[index])),)
                   if _plain() else (take(gg, index),))


def take(x, index) -> Tensor:
    """numpy-style indexing (slices, integer arrays, boolean masks)."""
    x = _as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = x.data[index]
    except IndexError as e:
        raise IndexError(f"index out of range for shape {x.shape}: {e}") from None
    src_shape = x.shape
    def vjp(g):
        if _plain():
            data = np.zeros(src_shape)
            if _is_basic_index(index):
                data[index] = g.data
            else:
                np.add.at(data, index, g.data)
            return (Tensor._wrap(data),)
        return (_scatter(g, index, src_shape),)

    return _record(np.array(out), (x,), vjp)


def concatenate(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        shapes = [x.shape for x in xs]
        raise ShapeError(f"concatenate shape mismatch {shapes}: {e}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        grads = []
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if not x.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            grads.append(take(g, tuple(sl)))
        return tuple(grads)

    return _record(out, xs, vjp)


# differentiation ----------------------------------------------------------


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    Inputs the output does not depend on get a zero gradient. With
    ``create_graph`` the returned tensors are themselves recorded and can be
    differentiated again.
    """
    inputs = list(inputs)
    if output.shape != ():
        raise ShapeError(f"grad requires a scalar output, got shape {output.shape}")
    wanted = {t._id for t in inputs if t.requires_grad}
    results: dict[int, Tensor] = {}
    if not output.requires_grad or not wanted:
        return [Tensor._wrap(np.zeros(t.shape)) for t in inputs]
    floor = min(wanted)

    nodes: dict[int, Tensor] = {output._id: output}
    stack = [output]
    pop, push = stack.pop, stack.append
    while stack:
        for p in pop()._parents:
            pid = p._id
            if pid >= floor and pid not in nodes and p.requires_grad:
                nodes[pid] = p
                push(p)

    grads: dict[int, Tensor] = {output._id: Tensor._wrap(np.ones(()))}
    wrap = Tensor._wrap
    with enable_grad(create_graph):
        for nid in sorted(nodes, reverse=True):
            g = grads.pop(nid, None)
            if g is None:
                continue
            if nid in wanted:
                results[nid] = g
                if nid == floor:
                    break
            node = nodes[nid]
            if node._vjp is None:
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                pid = p._id
                if pid < floor or not p.requires_grad:
                    continue
                prev = grads.get(pid)
                if prev is None:
                    grads[pid] = pg
                elif create_graph:
                    grads[pid] = add(prev, pg)
                else:
                    grads[pid] = wrap(prev.data + pg.data)

    out = []
    for t in inputs:
        g = results.get(t._id) if t.requires_grad else None
        if g is None:
            g = Tensor._wrap(np.zeros(t.shape))
        elif not create_graph and not g.data.flags.writeable:
            g = Tensor._wrap(np.array(g.data))
        out.append(g)
    return out


def _vdot(a: Tensor, v) -> Tensor:
    v = _as_tensor(v)
    if a.shape != v.shape:
        raise ShapeError(f"vector shape {v.shape} does not match parameter shape {a.shape}")
    return sum(mul(a, v.detach()))


def hessian_vector_product(loss: Tensor, params: Tensor, v, create_graph: bool = False,
                           first: Tensor | None = None) -> Tensor:
    """(d^2 loss / d params^2) v via a double backward pass.

    ``first`` may carry an already recorded ``grad(loss, params, create_graph=True)``
    so repeated products against the same loss share one first-order graph.
    """
    if first is None:
        first = grad(loss, [params], create_graph=True)[0]
    return grad(_vdot(first, v), [params], create_graph=create_graph)[0]


def mixed_second_derivative_vector_product(loss: Tensor, theta: Tensor, w: Tensor, v,
                                           create_graph: bool = False,
                                           first: Tensor | None = None) -> Tensor:
    """(d^2 loss / dw dtheta^T) v, i.e. the gradient in ``w`` of <grad_theta loss, v>."""
    if first is None:
        first = grad(loss, [theta], create_graph=True)[0]
    return grad(_vdot(first, v), [w], create_graph=create_graph)[0]
