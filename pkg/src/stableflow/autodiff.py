"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation builds a `Tensor` node holding the forward
value and a closure that routes the adjoint to its parents. Calling
``backward`` on an output resets the gradients of every reachable node and
runs the closures in reverse topological order, so several backward passes
(with different seed vectors) can be taken from one graph.

The module-level functions (``exp``, ``tanh``, ``matmul``, ``take``, ...)
dispatch on their argument type: given plain ndarrays they call numpy
directly, given `Tensor`s they record tape nodes. Code written against
them therefore runs both as a fast primal evaluation and as a traced
computation, with identical arithmetic.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the reverse-mode tape wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    # keep numpy from handling `ndarray <op> Tensor` itself so that the
    # reflected Tensor method runs instead
    __array_ufunc__ = None

    def __init__(self, data, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # -- graph traversal ------------------------------------------------

    def _toposort(self):
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into .grad for every reachable node.

        ``seed`` is the adjoint of ``self`` (defaults to ones). Gradients of
        all reachable nodes are reset first, so repeated calls with
        different seeds are independent.
        """
        order = self._toposort()
        for node in order:
            node.grad = np.zeros_like(node.data)
        if seed is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = np.broadcast_to(
                np.asarray(seed, dtype=np.float64), self.data.shape
            ).copy()
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ---------------------------------------------------

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _is_tensor(x):
    return isinstance(x, Tensor)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def constant(x):
    """Wrap an array as a no-parent tape node (no gradient flows into it)."""
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.add(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(av + bv, parents)

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad, av.shape)
        if _is_tensor(b):
            b.grad += _unbroadcast(out.grad, bv.shape)

    out._backward = _backward
    return out


def sub(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.subtract(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(av - bv, parents)

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad, av.shape)
        if _is_tensor(b):
            b.grad -= _unbroadcast(out.grad, bv.shape)

    out._backward = _backward
    return out


def mul(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.multiply(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(av * bv, parents)

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad * bv, av.shape)
        if _is_tensor(b):
            b.grad += _unbroadcast(out.grad * av, bv.shape)

    out._backward = _backward
    return out


def div(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.divide(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(av / bv, parents)

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad / bv, av.shape)
        if _is_tensor(b):
            b.grad += _unbroadcast(-out.grad * av / (bv * bv), bv.shape)

    out._backward = _backward
    return out


def power(a, exponent):
    if not _is_tensor(a):
        return np.power(a, exponent)
    av = a.data
    out = Tensor(av**exponent, (a,))

    def _backward():
        a.grad += out.grad * exponent * av ** (exponent - 1)

    out._backward = _backward
    return out


def exp(a):
    if not _is_tensor(a):
        return np.exp(a)
    out = Tensor(np.exp(a.data), (a,))

    def _backward():
        a.grad += out.grad * out.data

    out._backward = _backward
    return out


def log(a):
    if not _is_tensor(a):
        return np.log(a)
    out = Tensor(np.log(a.data), (a,))

    def _backward():
        a.grad += out.grad / a.data

    out._backward = _backward
    return out


def tanh(a):
    if not _is_tensor(a):
        return np.tanh(a)
    out = Tensor(np.tanh(a.data), (a,))

    def _backward():
        a.grad += out.grad * (1.0 - out.data * out.data)

    out._backward = _backward
    return out


def square(a):
    return mul(a, a)


# -- linear algebra / structure ------------------------------------------


def matmul(a, b):
    """Matrix product with numpy's stacked-matrix broadcasting."""
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.matmul(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(np.matmul(av, bv), parents)

    def _backward():
        g = out.grad
        if _is_tensor(a):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            a.grad += _unbroadcast(ga, av.shape)
        if _is_tensor(b):
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            b.grad += _unbroadcast(gb, bv.shape)

    out._backward = _backward
    return out


def transpose(a):
    """Swap the last two axes."""
    if not _is_tensor(a):
        return np.swapaxes(a, -1, -2)
    out = Tensor(np.swapaxes(a.data, -1, -2), (a,))

    def _backward():
        a.grad += np.swapaxes(out.grad, -1, -2)

    out._backward = _backward
    return out


def reshape(a, shape):
    if not _is_tensor(a):
        return np.reshape(a, shape)
    out = Tensor(np.reshape(a.data, shape), (a,))

    def _backward():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = _backward
    return out


def expand_last(a):
    """Append a trailing singleton axis (vector -> column matrix)."""
    shape = (a.shape if _is_tensor(a) else np.shape(a)) + (1,)
    return reshape(a, shape)


def take(a, indices, axis):
    """Select ``indices`` along ``axis`` (gather; adjoint is scatter-add)."""
    if not _is_tensor(a):
        return np.take(a, indices, axis=axis)
    idx = np.asarray(indices)
    out = Tensor(np.take(a.data, idx, axis=axis), (a,))
    ax = axis % a.data.ndim

    def _backward():
        sel = (slice(None),) * ax + (idx,)
        np.add.at(a.grad, sel, out.grad)

    out._backward = _backward
    return out


def concat(parts, axis):
    """Concatenate along ``axis``; non-Tensor parts become constants."""
    if not any(_is_tensor(p) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [constant(p) for p in parts]
    values = [p.data for p in parts]
    out = Tensor(np.concatenate(values, axis=axis), tuple(parts))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    ax = axis % out.data.ndim

    def _backward():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sel = (slice(None),) * ax + (slice(lo, hi),)
            part.grad += out.grad[sel]

    out._backward = _backward
    return out


def tsum(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))

    def _backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = _backward
    return out


def tmean(a, axis=None, keepdims=False):
    n = _value(a).size if axis is None else _value(a).shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def minimum(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.minimum(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(np.minimum(av, bv), parents)
    a_wins = av <= bv  # ties route to the first argument

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad * a_wins, av.shape)
        if _is_tensor(b):
            b.grad += _unbroadcast(out.grad * ~a_wins, bv.shape)

    out._backward = _backward
    return out


def maximum(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.maximum(a, b)
    av, bv = _value(a), _value(b)
    parents = tuple(x for x in (a, b) if _is_tensor(x))
    out = Tensor(np.maximum(av, bv), parents)
    a_wins = av >= bv

    def _backward():
        if _is_tensor(a):
            a.grad += _unbroadcast(out.grad * a_wins, av.shape)
        if _is_tensor(b):
            b.grad += _unbroadcast(out.grad * ~a_wins, bv.shape)

    out._backward = _backward
    return out


def clip(a, lo, hi):
    """Clamp to the closed interval [lo, hi] with zero gradient outside."""
    if not _is_tensor(a):
        return np.clip(a, lo, hi)
    out = Tensor(np.clip(a.data, lo, hi), (a,))
    inside = (a.data >= lo) & (a.data <= hi)

    def _backward():
        a.grad += out.grad * inside

    out._backward = _backward
    return out


def matvec(m, v):
    """Apply a (stack of) matrix to a (stack of) vector: [..., i, j] x [..., j]."""
    col = matmul(m, expand_last(v))
    shape = col.shape if _is_tensor(col) else np.shape(col)
    return reshape(col, shape[:-1])
