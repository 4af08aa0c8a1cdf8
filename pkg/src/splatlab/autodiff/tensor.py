"""Eager reverse-mode autodiff over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
input gradients.  Nodes carry a creation sequence number, so sorting the
reachable set by it gives a topological order without an explicit DFS.
"""

from __future__ import annotations

import itertools

import numpy as np

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Backward contract violated (second backward, non-scalar loss, ...)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._released = False

    # construction ---------------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # backward -------------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf reachable from this tensor.

        Saved activations are released afterwards; calling ``backward`` again
        on any tensor of the same graph raises :class:`GraphError`.
        """
        if self._released:
            raise GraphError("backward called twice on the same graph; re-run the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar loss")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        nodes = {}
        stack = [self]
        while stack:
            n = stack.pop()
            if id(n) in nodes:
                continue
            nodes[id(n)] = n
            stack.extend(p for p in n._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._released:
                raise GraphError("graph already consumed by an earlier backward()")
            if g is not None:
                in_grads = node._backward(g)
                for p, pg in zip(node._parents, in_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    pg = _unbroadcast(np.asarray(pg), p.shape)
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            node._backward = None
            node._released = True
        self._released = True

    # operators ------------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the backward uses a zero subgradient at 0."""
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._make(out, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = out.astype(xd.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)

    def bw(g):
        s = 1.0 / (1.0 + np.exp(-xd))
        return (g * s,)

    return Tensor._make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd > lo
    if hi is not None:
        inside &= xd < hi
    return Tensor._make(out, (x,), lambda g: (g * inside,))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; blocks every gradient to ``x``."""
    return Tensor(x.data)


# reductions / shape ------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(x.data[idx], (x,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


concat_channels = concat


def stack(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, _expand(t.shape, axis)) for t in tensors], axis=axis)


def _expand(shape, axis):
    shape = list(shape)
    ax = axis % (len(shape) + 1)
    shape.insert(ax, 1)
    return tuple(shape)


def matmul(a, b) -> Tensor:
    """``a @ b`` for a batch of row vectors ``(..., k) @ (k, n)``."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw)


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(np.where(cond, a.data, b.data), (a, b),
                        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def custom(inputs, forward):
    """Wrap an externally differentiated function as a graph node.

    ``forward(*arrays)`` must return ``(output_array, backward)`` where
    ``backward(grad_output)`` returns one gradient (or ``None``) per input.
    """
    inputs = [as_tensor(t) for t in inputs]
    out, bw = forward(*[t.data for t in inputs])
    return Tensor._make(out, inputs, bw)
