"""Tape-based reverse-mode differentiation over float64 numpy arrays."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .._kernels import as_f64, neighbor_max_fwd, scatter_channels

__all__ = [
    "DiffValue",
    "DomainError",
    "as_value",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "clip_min",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max",
    "concat",
    "reshape",
    "transpose",
    "gather",
    "neighbor_max",
    "batch_norm",
    "l2_norm",
    "cosine_similarity",
    "stop_gradient",
]


class DomainError(ValueError):
    """Argument outside a kernel's mathematical domain."""


class DiffValue:
    """An array node on the tape.

    ``_backward`` receives the gradient of this node and pushes contributions
    into the parents. Leaves created by the user have no parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return DiffValue(data, True, _parents=parents, _backward=backward_fn)
    return DiffValue(data)


def _accum(node: DiffValue, g) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _toposort(root: DiffValue) -> list[DiffValue]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior gradients are not needed after propagation
                node.grad = None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def neg(a) -> DiffValue:
    a = as_value(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


def relu(a) -> DiffValue:
    a = as_value(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: _accum(a, g * mask))


def exp(a) -> DiffValue:
    a = as_value(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> DiffValue:
    a = as_value(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def clip_min(a, lo: float) -> DiffValue:
    """``max(a, lo)``; clamped entries pass no gradient."""
    a = as_value(a)
    mask = a.data >= lo
    return _node(np.where(mask, a.data, lo), (a,), lambda g: _accum(a, g * mask))


def softmax(a, axis: int = -1) -> DiffValue:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> DiffValue:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), bw)


# -- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a) -> DiffValue:
    a = as_value(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: _accum(a, np.swapaxes(g, -1, -2)))


def reshape(a, shape) -> DiffValue:
    a = as_value(a)
    return _node(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def concat(parts, axis: int = -1) -> DiffValue:
    parts = [as_value(p) for p in parts]
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError("concat shape mismatch")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accum(p, np.take(g, np.arange(lo, hi), axis=ax))

    return _node(np.concatenate([p.data for p in parts], axis=ax), parts, bw)


def _index(a: DiffValue, key) -> DiffValue:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _node(a.data[key], (a,), bw)


def _scatter_rows(g2: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    m = idx.size
    s = sparse.csr_matrix((np.ones(m), (idx.ravel(), np.arange(m))), shape=(n, m))
    return np.asarray(s @ g2)


def gather(a, idx) -> DiffValue:
    """Rows of a 2D value: ``out[...] = a[idx[...]]``, shape ``idx.shape + (c,)``."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise ValueError("gather expects a 2D (rows, channels) value")
    n, c = a.shape

    def bw(g):
        _accum(a, _scatter_rows(g.reshape(-1, c), idx, n))

    return _node(a.data[idx], (a,), bw)


def neighbor_max(a, idx) -> DiffValue:
    """``out[i] = max_j a[idx[i, j]]`` per channel; ``a`` is (n, c), ``idx`` (m, k).

    The whole gradient goes to the first neighbor (in list order) attaining the max.
    """
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 2:
        raise ValueError("neighbor_max expects a (n, c) value and (m, k) indices")
    n, c = a.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("neighbor index out of range")
    best, src = neighbor_max_fwd(as_f64(a.data), np.ascontiguousarray(idx))

    def bw(g):
        _accum(a, scatter_channels(as_f64(g), src, n))

    return _node(best, (a,), bw)


# -- reductions ------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = as_value(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis: int = -1) -> DiffValue:  # noqa: A001
    """Max over one axis; ties send the gradient to the lowest index."""
    a = as_value(a)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        _accum(a, full)

    return _node(np.squeeze(out, axis=axis), (a,), bw)


# -- normalization and similarity ------------------------------------------------


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, momentum: float = 0.9, eps: float = 1e-5):
    """Per-feature normalization over every axis but the last.

    In training mode the batch statistics are used and the running buffers
    (plain arrays) are updated in place as ``m * running + (1 - m) * batch``.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def bw_eval(g):
            red = tuple(range(g.ndim - 1))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=red))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=red))
            _accum(x, g * gamma.data * inv)

        return _node(xhat * gamma.data + beta.data, (x, gamma, beta), bw_eval)
    n = flat.shape[0]
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least two rows")
    mu = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    running_mean *= momentum
    running_mean += (1 - momentum) * mu
    running_var *= momentum
    running_var += (1 - momentum) * var * n / (n - 1)
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        if gamma.requires_grad:
            _accum(gamma, (g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 * gamma.data
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            _accum(x, dx.reshape(x.shape))

    return _node(out, (x, gamma, beta), bw)


def l2_norm(a, axis: int = -1, keepdims: bool = False, eps: float = 1e-12) -> DiffValue:
    """Euclidean norm, clamped below at ``eps``."""
    a = as_value(a)
    n = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    safe = np.maximum(n, eps)
    live = n >= eps
    out = safe if keepdims else np.squeeze(safe, axis=axis)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        _accum(a, g * live * a.data / safe)

    return _node(out, (a,), bw)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> DiffValue:
    a, b = as_value(a), as_value(b)
    dot = sum(mul(a, b), axis=axis)
    return div(dot, mul(l2_norm(a, axis=axis, eps=eps), l2_norm(b, axis=axis, eps=eps)))


def stop_gradient(a) -> DiffValue:
    return DiffValue(as_value(a).data)
