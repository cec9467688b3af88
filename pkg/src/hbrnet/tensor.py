"""Reverse-mode automatic differentiation over whole numpy arrays.

A DiffTensor wraps an ndarray plus an optional same-shape gradient buffer.
Every op builds its result through make_node, which records a backward
closure; backward() walks the recorded graph in reverse topological order
and accumulates gradients into every tensor that requires them.

float32 is the working precision.  Ops propagate the input dtype, so test
oracles can run the same graphs in float64 by feeding float64 leaves.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends graph construction (inference mode)."""

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class DiffTensor:
    """N-d array with optional gradient and a backward closure for the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return (
            f"DiffTensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DiffTensor":
        """Same data, cut from the graph."""
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Only scalar outputs may start a backward pass.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {tuple(self.data.shape)}"
            )
        topo: list[DiffTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


# -- graph plumbing ----------------------------------------------------


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def make_node(data, parents, backward) -> DiffTensor:
    """Wrap an op result, recording the tape edge when gradients are on."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return DiffTensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return DiffTensor(data)


def accumulate(t: DiffTensor, g: np.ndarray) -> None:
    """Add g into t.grad, allocating on first touch.

    The first assignment copies: g may alias a child's grad buffer, and a
    later in-place += must not corrupt gradients flowing to siblings.
    """
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bw)


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return make_node(out, (a, b), bw)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bw)


def neg(a) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        accumulate(a, -g)

    return make_node(-a.data, (a,), bw)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_node(out, (a, b), bw)


def power(t, exponent: float) -> DiffTensor:
    t = as_tensor(t)
    p = float(exponent)
    out = t.data**p

    def bw(g):
        base = t.data
        if p >= 1.0:
            d = p * base ** (p - 1.0)
        else:
            # subgradient 0 at base == 0 keeps fractional powers finite
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(base > 0, p * base ** (p - 1.0), 0.0)
        accumulate(t, g * d)

    return make_node(out, (t,), bw)


def exp(t) -> DiffTensor:
    t = as_tensor(t)
    out = np.exp(t.data)

    def bw(g):
        accumulate(t, g * out)

    return make_node(out, (t,), bw)


def log(t) -> DiffTensor:
    t = as_tensor(t)
    out = np.log(t.data)

    def bw(g):
        accumulate(t, g / t.data)

    return make_node(out, (t,), bw)


def relu(t) -> DiffTensor:
    t = as_tensor(t)
    mask = t.data > 0  # subgradient 0 at exactly 0
    out = t.data * mask

    def bw(g):
        accumulate(t, g * mask)

    return make_node(out, (t,), bw)


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t) -> DiffTensor:
    t = as_tensor(t)
    out = _sigmoid_arr(t.data)

    def bw(g):
        accumulate(t, g * out * (1.0 - out))

    return make_node(out, (t,), bw)


def softplus(t) -> DiffTensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    t = as_tensor(t)
    x = t.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        accumulate(t, g * _sigmoid_arr(x))

    return make_node(out, (t,), bw)


# -- shape ops ---------------------------------------------------------


def reshape(t, shape) -> DiffTensor:
    t = as_tensor(t)
    orig = t.data.shape
    out = t.data.reshape(shape)

    def bw(g):
        accumulate(t, g.reshape(orig))

    return make_node(out, (t,), bw)


def transpose(t, axes) -> DiffTensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = t.data.transpose(axes)

    def bw(g):
        accumulate(t, g.transpose(inv))

    return make_node(out, (t,), bw)


def _check_basic_key(key) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not isinstance(part, (int, np.integer, slice, type(Ellipsis))):
            raise TypeError(
                "only basic slicing (ints, slices, ellipsis) is differentiable here"
            )


def getitem(t, key) -> DiffTensor:
    t = as_tensor(t)
    _check_basic_key(key)
    out = t.data[key]

    def bw(g):
        z = np.zeros_like(t.data)
        z[key] = g
        accumulate(t, z)

    return make_node(out, (t,), bw)


def concat(parts, axis: int = 0) -> DiffTensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    axis = axis % out.ndim
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            accumulate(p, g[tuple(idx)])
            offset += n

    return make_node(out, tuple(parts), bw)


# -- reductions and matmul ---------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        return (int(axis) % ndim,)
    return tuple(int(a) % ndim for a in axis)


def tsum(t, axis=None, keepdims: bool = False) -> DiffTensor:
    t = as_tensor(t)
    shape = t.data.shape
    axes = _norm_axes(axis, t.data.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        accumulate(t, np.broadcast_to(gg, shape))

    return make_node(out, (t,), bw)


def tmean(t, axis=None, keepdims: bool = False) -> DiffTensor:
    t = as_tensor(t)
    axes = _norm_axes(axis, t.data.ndim)
    count = 1
    for a in axes:
        count *= t.data.shape[a]
    return tsum(t, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.data.ndim}-d and {b.data.ndim}-d"
        )
    out = a.data @ b.data

    def bw(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_node(out, (a, b), bw)
