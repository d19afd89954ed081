"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape: each op records its parents and a closure that maps the
output gradient to parent gradients. Only the ops the model needs are
implemented. Gradients accumulate into ``Tensor.grad`` as plain arrays.

Accumulation is never in place, so a backward closure may return the
incoming gradient (or a view of it) without copying.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "as_tensor", "custom",
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "tanh", "softplus", "gelu",
    "tsum", "tmean", "reshape", "swapaxes", "getitem",
    "softmax", "dropout", "backward",
]

# Python floats, not numpy scalars: a np.float64 factor would silently
# promote float32 activations to float64 across the whole graph.
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """Array node in the autodiff graph.

    ``requires_grad`` marks leaves the caller wants gradients for; interior
    nodes inherit it from their parents. After ``backward`` the gradient of
    every reachable node with ``requires_grad`` is in ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def custom(data, parents, bw):
    """Build a graph node from precomputed data and an explicit backward.

    ``bw(out_grad)`` must return one gradient array (or None) per parent.
    Used by model code for ops the core engine does not provide.
    """
    out = Tensor(data)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _pair(a, b):
    """Wrap operands, casting a bare scalar/array to the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _pair(a, b)
    return custom(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _pair(a, b)
    return custom(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _pair(a, b)
    return custom(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * out / b.data, b.data.shape))

    return custom(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return custom(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects arrays with ndim >= 2")

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return custom(a.data @ b.data, (a, b), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return custom(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    """log(1 + e^x), computed as logaddexp(0, x) for stability."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return custom(out, (a,), lambda g: (g * expit(a.data),))


def gelu(a):
    """Gaussian error linear unit, exact erf form."""
    a = as_tensor(a)
    x = a.data
    c = erf(x * _INV_SQRT2)
    out = 0.5 * x * (1.0 + c)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + c) + x * pdf),)

    return custom(out, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return custom(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return custom(a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(a.data.shape),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return custom(a.data.swapaxes(i, j), (a,),
                  lambda g: (g.swapaxes(i, j),))


def getitem(a, idx):
    """Basic slicing only: each input element maps to at most one output."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return custom(out, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (out * g).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return custom(out, (a,), bw)


def dropout(a, rate, rng):
    """Inverted dropout. Caller gates on training mode; rate 0 is a no-op."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.data.dtype)
    mask = keep * scale
    return custom(a.data * mask, (a,), lambda g: (g * mask,))


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed=None):
    """Backpropagate from ``root``; scalar roots default to seed 1.

    Every node reachable from the root has its gradient recomputed from
    scratch, so calling backward again on the same graph is safe.
    """
    if not root.requires_grad:
        raise ValueError("backward from a tensor that requires no gradient")
    if seed is None:
        if root.data.size != 1:
            raise ValueError("seed gradient required for non-scalar root")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=root.data.dtype)
    if seed.shape != root.data.shape:
        raise ValueError(f"seed shape {seed.shape} != root shape {root.data.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = seed
    for node in reversed(order):
        if node._bw is None or node.grad is None:
            continue
        grads = node._bw(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
