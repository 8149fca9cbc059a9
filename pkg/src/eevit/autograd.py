"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by a differentiable operation carries a node
linking back to its inputs.  ``backward`` traces the graph from a
scalar loss into a :class:`Tape` (a topological record of the executed
operations) and replays it once in reverse, accumulating gradients
into the leaf tensors that requested them.

All arrays are float64 and row-major; operations never mutate their
inputs.
"""

from __future__ import annotations

import math

import numpy as np

Array = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class ShapeMismatchError(ValueError):
    """Operand extents are incompatible for the requested operation."""


class NonScalarLossError(ValueError):
    """backward() was called on a tensor with more than one element."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager suspending graph construction (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class _Node:
    __slots__ = ("inputs", "grad_fn")

    def __init__(self, inputs, grad_fn):
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A float64 n-d array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.asarray(data, dtype=np.float64)
        self.data: Array = data
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_lift = as_tensor


def _result(data: Array, inputs: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(inputs, grad_fn)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Topologically ordered record of the operations reaching a root.

    Parents always precede children, so iterating the record in reverse
    visits every node exactly once after all of its consumers.
    """

    __slots__ = ("tensors",)

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.trace(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.grad_fn(g)):
            if pg is None:
                continue
            if parent.node is None:
                if parent.requires_grad:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        return (-g,)

    return _result(-a.data, (a,), grad_fn)


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant scalar exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("tensor exponents are not supported")
    a = _lift(a)
    p = float(exponent)
    out = a.data**p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _result(out, (a,), grad_fn)


def log(a) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), grad_fn)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), grad_fn)


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    a = _lift(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        sech2 = 1.0 - t * t
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _result(out, (a,), grad_fn)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src_shape = a.data.shape

    def grad_fn(g):
        return (g.reshape(src_shape),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), grad_fn)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    src_shape = a.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, src_shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), grad_fn)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a, key) -> Tensor:
    a = _lift(a)
    basic = _is_basic_key(key)

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        return (buf,)

    return _result(a.data[key], (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, pieces))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


# -- reductions ------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def grad_fn(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), grad_fn)


def gather_rows(a, index: Array) -> Tensor:
    """Pick one entry per row along the last axis: out[...] = a[..., index[...]]."""
    a = _lift(a)
    idx = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return (buf,)

    return _result(out, (a,), grad_fn)


# -- softmax family ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (rows sum to one)."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), grad_fn)


# -- spatial primitives -------------------------------------------------------


def avg_pool2d(a, window: int) -> Tensor:
    """Non-overlapping window average over the two middle axes of [B, H, W, C].

    Edge windows that fall short of ``window`` average over their true
    element count, so constants are preserved for every grid size.
    """
    a = _lift(a)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    b, h, w, c = a.data.shape
    ih = np.arange(0, h, window)
    iw = np.arange(0, w, window)
    row_counts = np.diff(np.append(ih, h))
    col_counts = np.diff(np.append(iw, w))
    sums = np.add.reduceat(np.add.reduceat(a.data, ih, axis=1), iw, axis=2)
    counts = np.multiply.outer(row_counts, col_counts).astype(np.float64)
    out = sums / counts[None, :, :, None]

    def grad_fn(g):
        gn = g / counts[None, :, :, None]
        expanded = np.repeat(np.repeat(gn, row_counts, axis=1), col_counts, axis=2)
        return (expanded,)

    return _result(out, (a,), grad_fn)


def depthwise_conv2d(a, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise 2-D cross-correlation on [B, H, W, C] with kernel [k, k, C]."""
    a, weight = _lift(a), _lift(weight)
    k = weight.data.shape[0]
    if weight.data.ndim != 3 or weight.data.shape[1] != k:
        raise ShapeMismatchError(f"kernel must be [k, k, C], got {weight.data.shape}")
    if a.data.ndim != 4 or a.data.shape[3] != weight.data.shape[2]:
        raise ShapeMismatchError(
            f"input {a.data.shape} incompatible with kernel {weight.data.shape}"
        )
    b, h, w, c = a.data.shape
    xp = np.pad(a.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hout = (h + 2 * padding - k) // stride + 1
    wout = (w + 2 * padding - k) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeMismatchError("kernel larger than padded input")
    wd = weight.data
    out = np.zeros((b, hout, wout, c))
    for u in range(k):
        for v in range(k):
            out += (
                xp[:, u : u + stride * hout : stride, v : v + stride * wout : stride, :]
                * wd[u, v]
            )

    def grad_fn(g):
        ga = gw = None
        if a.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[
                        :, u : u + stride * hout : stride, v : v + stride * wout : stride, :
                    ] += g * wd[u, v]
            ga = gxp[:, padding : padding + h, padding : padding + w, :]
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for u in range(k):
                for v in range(k):
                    patch = xp[
                        :, u : u + stride * hout : stride, v : v + stride * wout : stride, :
                    ]
                    gw[u, v] = (patch * g).sum(axis=(0, 1, 2))
        return ga, gw

    return _result(out, (a, weight), grad_fn)
