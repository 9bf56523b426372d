"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Value` wraps an ndarray. Operations on values that require
gradients record their parents and a vector-Jacobian rule; :func:`backward`
walks the recorded graph in reverse topological order.

Broadcasting follows numpy for the elementwise binary ops (``add``, ``sub``,
``mul``, ``div``); gradients are summed back onto the operand's shape.
Every other op documents its own shape rule.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Value", "Graph", "GradCheckError", "ShapeError",
    "set_precision", "get_dtype", "precision", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "conv2d",
    "upsample2d", "sigmoid", "tanh", "relu", "exp", "log", "abs_", "square",
    "clip", "reshape", "transpose", "concatenate", "getitem", "sum_", "mean",
    "backward", "zero_grad", "grad_check",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GradCheckError(ArithmeticError):
    """A gradient check hit a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def set_precision(name: str) -> None:
    """Set the global float precision (``"float32"`` or ``"float64"``)."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    old = np.dtype(_dtype).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Value:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Value(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __hash__ = object.__hash__

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(x, dtype=getattr(x, "dtype", None) if isinstance(x, np.ndarray) else None)


def _make(data, parents, vjp, op) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)

def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Value:
    a = _as_value(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Value:
    """Matrix product of a ``(..., m, k)`` and a 2-D ``(k, n)`` or batched operand."""
    a, b = _as_value(a), _as_value(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 2 and bd.ndim == 2:
            gb = ad.T @ g
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


def linear(x, weight, bias=None) -> Value:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``(batch, in)``."""
    x, weight = _as_value(x), _as_value(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ wd.T, xd.T @ g), "linear")
    bias = _as_value(bias)
    if bias.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = out + bias.data
    return _make(out, (x, weight, bias),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def _im2col(xp, kh, kw, stride, ho, wo):
    """Rows ordered (N, Ho, Wo), columns (kh, kw, C) from a padded NHWC array."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    s = stride
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Value:
    """Direct 2-D cross-correlation in channels-last layout.

    Shapes: ``x`` is ``(N, H, W, C)``, ``weight`` is ``(kh, kw, C, O)``,
    ``bias`` is ``(O,)``; the result is ``(N, Ho, Wo, O)``. Zero padding is
    applied symmetrically.
    """
    x, weight = _as_value(x), _as_value(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, h, w, c = x.shape
    kh, kw, _, o = weight.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {weight.shape[:2]} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    w2 = weight.data.reshape(kh * kw * c, o)
    out = cols @ w2
    if bias is not None:
        bias = _as_value(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out += bias.data
    out = out.reshape(n, ho, wo, o)
    wshape, pshape = weight.shape, xp.shape

    def vjp(g):
        g2 = g.reshape(n * ho * wo, o)
        gw = (cols.T @ g2).reshape(wshape)
        gb = None if bias is None else g2.sum(axis=0)
        if not x.requires_grad:
            gx = None
        elif s == 1 and p <= min(kh, kw) - 1 and o < c:
            # full correlation with the flipped kernel; cheaper when O < C
            qh, qw = kh - 1 - p, kw - 1 - p
            gp = np.pad(g, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
            wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * o, c)
            gx = (_im2col(gp, kh, kw, 1, h, w) @ wflip).reshape(n, h, w, c)
        else:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, vjp, "conv2d")


def upsample2d(x, factor=2) -> Value:
    """Nearest-neighbour upsampling of an ``(N, H, W, C)`` map."""
    x = _as_value(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2d: expected 4-D input, got {x.shape}")
    f = int(factor)
    out = x.data.repeat(f, axis=1).repeat(f, axis=2)
    n, h, w, c = x.shape

    def vjp(g):
        return (g.reshape(n, h, f, w, f, c).sum(axis=(2, 4)),)

    return _make(out, (x,), vjp, "upsample2d")


# ---------------------------------------------------------------------------
# elementwise unary ops

def sigmoid(x) -> Value:
    x = _as_value(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Value:
    x = _as_value(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Value:
    x = _as_value(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Value:
    x = _as_value(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Value:
    x = _as_value(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs_(x) -> Value:
    x = _as_value(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x) -> Value:
    x = _as_value(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def clip(x, lo, hi) -> Value:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    x = _as_value(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape) -> Value:
    x = _as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    old = x.shape
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Value:
    x = _as_value(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concatenate(values: Sequence, axis=-1) -> Value:
    """Join along ``axis``; all other dimensions must agree."""
    vals = [_as_value(v) for v in values]
    if not vals:
        raise ShapeError("concatenate: no operands")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise ShapeError(f"concatenate: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(vals), vjp, "concatenate")


def getitem(x, index) -> Value:
    """Basic slicing (ints, slices, ellipsis)."""
    x = _as_value(x)
    out = x.data[index]
    shape, dtype = x.shape, x.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(out, (x,), vjp, "slice")


def sum_(x, axis=None) -> Value:
    x = _as_value(x)
    out = np.sum(x.data, axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def mean(x, axis=None) -> Value:
    x = _as_value(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(count))


# ---------------------------------------------------------------------------
# graph traversal

class Graph:
    """Topologically ordered record of every node reachable from ``output``.

    ``records`` lists nodes inputs-first; each holds its parents and local
    vector-Jacobian rule. Built once, it can be replayed by :meth:`backward`.
    """

    def __init__(self, output: Value):
        self.output = output
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.records = order

    def __len__(self):
        return len(self.records)

    def leaves(self):
        return [r for r in self.records if r._vjp is None]

    def backward(self):
        out = self.output
        if out.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {out.shape}")
        for node in self.records:
            if node._vjp is not None:
                node.grad = None
        if not out.requires_grad:
            return
        seed = np.ones_like(out.data)
        out.grad = seed if out.grad is None or out._vjp is not None else out.grad + seed
        for node in reversed(self.records):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None


def backward(loss: Value, params: Iterable[Value] | None = None, graph: Graph | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a dict mapping each of ``params`` (when given) to its gradient;
    parameters that the loss does not depend on map to zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph(loss)
    graph.backward()
    if params is None:
        return {leaf: leaf.grad for leaf in graph.leaves()}
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


def grad_check(f: Callable[[Value], Value], x: Value, step: float = 1e-6) -> float:
    """Largest relative disagreement between backprop and central differences.

    The error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``. ``f`` must
    be deterministic and return a scalar Value.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = x if isinstance(x, Value) else Value(x)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if not np.isfinite(out.data).all():
            raise GradCheckError("non-finite function value at the base point")
        backward(out)
        analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
        base = x.data.copy()
        numeric = np.zeros(x.shape, dtype=np.float64)
        with no_grad():
            for idx in np.ndindex(*x.shape):
                x.data[idx] = base[idx] + step
                fp = float(f(x).data)
                x.data[idx] = base[idx] - step
                fm = float(f(x).data)
                x.data[idx] = base[idx]
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(f"non-finite function value at coordinate {idx}", idx)
                numeric[idx] = (fp - fm) / (2.0 * step)
    finally:
        x.requires_grad = was
        x.grad = None
    if not np.isfinite(analytic).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise GradCheckError(f"non-finite analytic gradient at coordinate {bad}", bad)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
