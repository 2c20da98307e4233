"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough ops for a small transformer: broadcasting arithmetic, matmul,
smooth nonlinearities, reductions, reshapes, softmax variants, and gather.
Gradients accumulate into .grad after backward().
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_shape(grad: np.ndarray, shape) -> np.ndarray:
    """Undo numpy broadcasting: reduce grad back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, grad: np.ndarray):
    if not t.requires_grad:
        return
    grad = _sum_to_shape(np.asarray(grad, dtype=np.float64), t.data.shape)
    t.grad = grad if t.grad is None else t.grad + grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))
    out._backward_fn = lambda g: (_accum(a, g), _accum(b, g))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    out._backward_fn = lambda g: (_accum(a, g * b.data), _accum(b, g * a.data))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data) if a.data.ndim > 1 else g * b.data
            _accum(a, ga.reshape(a.data.shape))
            _accum(b, (a.data.swapaxes(-1, -2) @ g) if a.data.ndim > 1 else g * a.data)
        else:
            _accum(a, g @ b.data.swapaxes(-1, -2))
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    out._backward_fn = bw
    return out


def powc(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data ** exponent, (a,))
    out._backward_fn = lambda g: _accum(a, g * exponent * a.data ** (exponent - 1.0))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, (a,))
    out._backward_fn = lambda g: _accum(a, g * y)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), (a,))
    out._backward_fn = lambda g: _accum(a, g / a.data)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, (a,))
    out._backward_fn = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * cdf, (a,))
    out._backward_fn = lambda g: _accum(
        a, g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))
    )
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward_fn = bw
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out._backward_fn = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), (a,))
    out._backward_fn = lambda g: _accum(a, g.transpose(inverse))
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (a,))
    out._backward_fn = lambda g: _accum(
        a, y * (g - (g * y).sum(axis=axis, keepdims=True))
    )
    return out


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, (a,))
    out._backward_fn = lambda g: _accum(
        a, g - np.exp(y) * g.sum(axis=axis, keepdims=True)
    )
    return out


def take(a, idx) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], (a,))

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    out._backward_fn = bw
    return out


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] for paired index vectors."""
    a = as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(a.data[rows, cols], (a,))

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        _accum(a, ga)

    out._backward_fn = bw
    return out


def backward(root: Tensor):
    """Accumulate gradients of `root` (summed if non-scalar) into the graph."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
