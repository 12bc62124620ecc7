"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs participate in differentiation appends a node to
the active :class:`Tape`.  :func:`backward` replays that tape in exact reverse
recording order, accumulating gradients into leaf tensors, and then clears it.

The engine is deliberately small: it supports what the encoder, the survival
head and the contrastive objective need, plus a :func:`custom_op` hook for
operations whose backward rule is easier to write by hand.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "get_tape",
    "backward",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "linear",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "take",
    "reduce_sum",
    "reduce_mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "sqrt",
    "l2_norm",
    "axpy",
    "pairwise_distance",
]


class Tensor:
    """A float64 array that may record its history on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor", "construction from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = [True]


def get_tape() -> Tape:
    return _TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording anything."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    # a sum is non-finite whenever any entry is (or on overflow, which is also fatal)
    if not math.isfinite(np.add.reduce(out, axis=None)):
        raise NumericError(op)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.name = None
    track = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    res.requires_grad = track
    if track:
        _TAPE.record(_Node(op, tuple(inputs), res, backward_fn))
    return res


def custom_op(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Register a hand-written operation.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order.
    """
    return _finish(op, np.asarray(out, dtype=np.float64), inputs, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        _TAPE.clear()
        return
    loss.grad = np.ones_like(loss.data)
    nodes = _TAPE.nodes
    for node in reversed(nodes):
        out = node.output
        g = out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            _accumulate(inp, gi)
        out.grad = None if out is not loss else out.grad
    _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _finish("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def axpy(y, x, c: float) -> Tensor:
    """``y + c * x`` as a single node (shapes must match exactly)."""
    y, x = _wrap(y), _wrap(x)
    if y.shape != x.shape:
        raise ShapeError("axpy", y.shape, x.shape)
    c = float(c)
    return _finish("axpy", y.data + c * x.data, (y, x), lambda g: (g, g * c))


# linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            return np.multiply.outer(g, bd), np.tensordot(g, ad, axes=g.ndim)
        if ad.ndim == 1:
            return bd @ g, np.multiply.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _finish("matmul", ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` for 2-D ``x``; one tape node."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", w.shape, b.shape)
        out = out + b.data
        inputs = (x, w, b)

    def bw(g):
        gx = g @ wd.T
        gw = xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _finish("linear", out, inputs, bw)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _finish("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    s = a.shape
    return _finish("reshape", out, (a,), lambda g: (g.reshape(s),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _finish("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    n = len(ts)
    return _finish(
        "stack",
        out,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def take(a, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    a = _wrap(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape) from exc
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _finish("slice", np.array(out, dtype=np.float64), (a,), bw)


# reductions ---------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _finish("reduce_sum", np.asarray(out), (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size / max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _finish("reduce_mean", np.asarray(out), (a,), bw)


# elementwise unary --------------------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _finish("log", out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _finish("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    # split by sign so exp never overflows
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _finish("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (r,)

    return _finish("sqrt", out, (a,), bw)


def l2_norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    a = _wrap(a)
    ad = a.data
    nrm = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, gk * ad / safe, 0.0),)

    return _finish("l2_norm", out, (a,), bw)


def pairwise_distance(z) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    Coincident rows (including the diagonal) get a zero subgradient.
    """
    z = _wrap(z)
    if z.ndim != 2:
        raise ShapeError("pairwise_distance", z.shape)
    zd = z.data
    diff = zd[:, None, :] - zd[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def bw(g):
        safe = np.where(dist > 0, dist, 1.0)
        w = np.where(dist > 0, g / safe, 0.0)
        w = w + w.T
        gz = w.sum(axis=1)[:, None] * zd - w @ zd
        return (gz,)

    return _finish("pairwise_distance", dist, (z,), bw)
