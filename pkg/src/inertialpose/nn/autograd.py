"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only what the recurrent fusion models need: elementwise math, matmul,
reductions, indexing/concatenation and a few quaternion primitives with
hand-written backward rules. Everything runs in float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .. import quaternion as Q

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED:
            parents = tuple(p for p in parents if isinstance(p, Tensor))
            if any(p.requires_grad for p in parents):
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
        return out

    def _acc(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        self._acc(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes do not need to keep their gradient
                    node.grad = None

    # operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(g, b.shape))

    out = Tensor._make(a.data + b.data, (a, b), bw)
    return out


def neg(a):
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: a._acc(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g * out_data / b.data, b.shape))

    return Tensor._make(out_data, (a, b), bw)


def _unary(a, value, dfdx):
    a = as_tensor(a)
    return Tensor._make(value, (a,), lambda g: a._acc(g * dfdx()))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _unary(a, y, lambda: 1.0 - y * y)


def sigmoid(a):
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, y, lambda: y * (1.0 - y))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda: mask)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, lambda: y)


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _unary(a, y, lambda: 0.5 / y)


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a):
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def tabs(a):
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def arccos(a, clamp=Q.GRAD_CLAMP):
    """``arccos`` with the input clipped to [-1, 1]; slope uses ``clamp``."""
    a = as_tensor(a)
    x = a.data
    xc = np.clip(x, -clamp, clamp)
    return _unary(a, np.arccos(np.clip(x, -1.0, 1.0)), lambda: -1.0 / np.sqrt(1.0 - xc * xc))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda: inside)


def square(a):
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data)


def where(mask, a, b):
    """Select with a constant boolean ``mask``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# linear algebra, reductions, shapes


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._acc(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._acc(_unbroadcast(gb, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape))

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: a._acc(g.reshape(a.shape)))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._acc(full)

    return Tensor._make(a.data[idx], (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._acc(part)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            t._acc(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------------------
# quaternion primitives


def _left_matrix(a):
    """``L(a)`` with ``a * b == L(a) @ b``."""
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, -z, y], -1),
            np.stack([y, z, w, -x], -1),
            np.stack([z, -y, x, w], -1),
        ],
        -2,
    )


def _right_matrix(b):
    """``R(b)`` with ``a * b == R(b) @ a``."""
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, z, -y], -1),
            np.stack([y, -z, w, x], -1),
            np.stack([z, y, -x, w], -1),
        ],
        -2,
    )


def qmul(a, b):
    """Hamilton product (no renormalization)."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(np.einsum("...ij,...i->...j", _right_matrix(b.data), g), a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(np.einsum("...ij,...i->...j", _left_matrix(a.data), g), b.shape))

    return Tensor._make(Q.multiply_raw(a.data, b.data), (a, b), bw)


def qconj(a):
    return mul(a, np.array([1.0, -1.0, -1.0, -1.0]))


def normalize(a, eps=1e-12):
    """Unit-normalize along the last axis."""
    a = as_tensor(a)
    n = np.maximum(np.linalg.norm(a.data, axis=-1, keepdims=True), eps)
    y = a.data / n

    def bw(g):
        a._acc((g - y * np.sum(y * g, axis=-1, keepdims=True)) / n)

    return Tensor._make(y, (a,), bw)


def exp_map(v):
    """Rotation vector ``[..., 3]`` to unit quaternion ``[..., 4]``."""
    v = as_tensor(v)
    vd = v.data
    th2 = np.sum(vd * vd, axis=-1, keepdims=True)
    th = np.sqrt(th2)
    small = th < 1e-3
    safe = np.where(small, 1.0, th)
    s = np.where(small, 0.5 - th2 / 48.0 + th2 * th2 / 3840.0, np.sin(0.5 * th) / safe)
    c = np.where(small, -1.0 / 24.0 + th2 / 960.0, (0.5 * th * np.cos(0.5 * th) - np.sin(0.5 * th)) / (safe**3))
    out = np.concatenate([np.cos(0.5 * th), s * vd], axis=-1)

    def bw(g):
        gw, gv = g[..., :1], g[..., 1:]
        v._acc(gw * (-0.5 * s * vd) + s * gv + c * vd * np.sum(vd * gv, axis=-1, keepdims=True))

    return Tensor._make(out, (v,), bw)


def cross(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def dot(a, b):
    return tsum(mul(a, b), axis=-1)


def qad(pred, target):
    """Per-element QAD against a constant target, ``[..., 4] -> [...]``.

    The value uses the well-conditioned atan2 form; the slope is the clamped
    arccos derivative shared with :func:`quaternion.qad_grad`.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=float)
    value = Q.qad(target, pred.data)

    def bw(g):
        pred._acc(g[..., None] * Q.qad_grad(target, pred.data))

    return Tensor._make(value, (pred,), bw)
