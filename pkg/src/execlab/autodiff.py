"""Minimal tape-based reverse-mode differentiation over numpy arrays.

A ``Tape`` records nodes in creation order (already topological), so the
backward pass is a single reverse sweep. Networks write their forward pass
once against the engine protocol; ``TapeEngine`` builds the graph while
``NumpyEngine`` evaluates the identical expressions without recording,
which keeps the fast inference path and the differentiated path in lockstep.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["Var", "Tape", "TapeEngine", "NumpyEngine", "PoolingDegenerateError"]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class PoolingDegenerateError(ValueError):
    """Raised when masked pooling is asked to average over zero positions."""


# value helpers shared by both engines

def sigmoid_val(x):
    # clipping keeps exp in range; sigmoid saturates far inside +-60 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def silu_val(x):
    return x * sigmoid_val(x)


def gelu_val(x):
    # tanh-form gelu (the standard fast approximation)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def tanh_val(x):
    return np.tanh(x)


def softplus_val(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def layer_norm_val(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def masked_softmax_val(scores, bias):
    z = scores + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Var:
    """A node in the tape: value plus a closure distributing its gradient."""

    __slots__ = ("value", "grad", "_bw")

    def __init__(self, value, bw=None):
        self.value = value
        self.grad = None
        self._bw = bw

    def _acc(self, g):
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Ordered record of one forward pass; supports one backward sweep."""

    def __init__(self):
        self.nodes: list[Var] = []

    def _node(self, value, bw=None) -> Var:
        v = Var(value, bw)
        self.nodes.append(v)
        return v

    def leaf(self, value) -> Var:
        return self._node(np.asarray(value))

    def backward(self, root: Var, upstream) -> None:
        root._acc(np.broadcast_to(np.asarray(upstream, dtype=root.value.dtype),
                                  root.value.shape))
        for node in reversed(self.nodes):
            if node.grad is not None and node._bw is not None:
                node._bw(node.grad)


def _val(x):
    return x.value if isinstance(x, Var) else x


class TapeEngine:
    """Engine that records every operation on a tape."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def leaf(self, value):
        return self.tape.leaf(value)

    def matmul(self, a, b):
        av, bv = _val(a), _val(b)
        out = self.tape._node(av @ bv)

        def bw(g, a=a, b=b, av=av, bv=bv):
            if isinstance(a, Var):
                a._acc(_unbroadcast(g @ bv.swapaxes(-1, -2), av.shape))
            if isinstance(b, Var):
                b._acc(_unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape))

        out._bw = bw
        return out

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        out = self.tape._node(av + bv)

        def bw(g, a=a, b=b):
            if isinstance(a, Var):
                a._acc(_unbroadcast(g, a.value.shape))
            if isinstance(b, Var):
                b._acc(_unbroadcast(g, b.value.shape))

        out._bw = bw
        return out

    def sub(self, a, b):
        av, bv = _val(a), _val(b)
        out = self.tape._node(av - bv)

        def bw(g, a=a, b=b):
            if isinstance(a, Var):
                a._acc(_unbroadcast(g, a.value.shape))
            if isinstance(b, Var):
                b._acc(_unbroadcast(-g, b.value.shape))

        out._bw = bw
        return out

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        out = self.tape._node(av * bv)

        def bw(g, a=a, b=b, av=av, bv=bv):
            if isinstance(a, Var):
                a._acc(_unbroadcast(g * bv, av.shape))
            if isinstance(b, Var):
                b._acc(_unbroadcast(g * av, np.shape(bv)))

        out._bw = bw
        return out

    def div(self, a, b):
        av, bv = _val(a), _val(b)
        out = self.tape._node(av / bv)

        def bw(g, a=a, b=b, av=av, bv=bv, out=out):
            if isinstance(a, Var):
                a._acc(_unbroadcast(g / bv, np.shape(av)))
            if isinstance(b, Var):
                b._acc(_unbroadcast(-g * out.value / bv, np.shape(bv)))

        out._bw = bw
        return out

    def silu(self, a):
        av = _val(a)
        s = sigmoid_val(av)
        out = self.tape._node(av * s)

        def bw(g, a=a, av=av, s=s):
            a._acc(g * (s * (1.0 + av * (1.0 - s))))

        out._bw = bw
        return out

    def gelu(self, a):
        av = _val(a)
        t = np.tanh(_GELU_C * (av + _GELU_A * av * av * av))
        out = self.tape._node(0.5 * av * (1.0 + t))

        def bw(g, a=a, av=av, t=t):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * av * av)
            a._acc(g * (0.5 * (1.0 + t) + 0.5 * av * (1.0 - t * t) * du))

        out._bw = bw
        return out

    def tanh(self, a):
        t = np.tanh(_val(a))
        out = self.tape._node(t)

        def bw(g, a=a, t=t):
            a._acc(g * (1.0 - t * t))

        out._bw = bw
        return out

    def softplus(self, a):
        av = _val(a)
        out = self.tape._node(softplus_val(av))

        def bw(g, a=a, av=av):
            a._acc(g * sigmoid_val(av))

        out._bw = bw
        return out

    def exp(self, a):
        e = np.exp(_val(a))
        out = self.tape._node(e)

        def bw(g, a=a, e=e):
            a._acc(g * e)

        out._bw = bw
        return out

    def layer_norm(self, a, gamma, beta, eps=1e-5):
        av, gv, bv = _val(a), _val(gamma), _val(beta)
        y, xhat, inv = layer_norm_val(av, gv, bv, eps)
        out = self.tape._node(y)

        def bw(g, a=a, gamma=gamma, beta=beta, gv=gv, xhat=xhat, inv=inv):
            if isinstance(gamma, Var):
                gamma._acc(_unbroadcast(g * xhat, gamma.value.shape))
            if isinstance(beta, Var):
                beta._acc(_unbroadcast(g, beta.value.shape))
            if isinstance(a, Var):
                gx = g * gv
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                a._acc(inv * (gx - m1 - xhat * m2))

        out._bw = bw
        return out

    def masked_softmax(self, scores, bias):
        sv = _val(scores)
        y = masked_softmax_val(sv, bias)
        out = self.tape._node(y)

        def bw(g, scores=scores, y=y):
            dot = (g * y).sum(axis=-1, keepdims=True)
            scores._acc(y * (g - dot))

        out._bw = bw
        return out

    def sum_axis(self, a, axis, keepdims=False):
        av = _val(a)
        out = self.tape._node(av.sum(axis=axis, keepdims=keepdims))

        def bw(g, a=a, av=av, axis=axis, keepdims=keepdims):
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._acc(np.broadcast_to(g, av.shape))

        out._bw = bw
        return out

    def reshape(self, a, shape):
        av = _val(a)
        out = self.tape._node(av.reshape(shape))

        def bw(g, a=a, av=av):
            a._acc(g.reshape(av.shape))

        out._bw = bw
        return out

    def transpose(self, a, axes):
        av = _val(a)
        inv = tuple(np.argsort(axes))
        out = self.tape._node(av.transpose(axes))

        def bw(g, a=a, inv=inv):
            a._acc(g.transpose(inv))

        out._bw = bw
        return out

    def concat(self, parts, axis=-1):
        vals = [_val(p) for p in parts]
        out = self.tape._node(np.concatenate(vals, axis=axis))
        sizes = [v.shape[axis] for v in vals]
        offs = np.cumsum([0] + sizes)

        def bw(g, parts=parts, offs=offs, axis=axis):
            for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
                if isinstance(p, Var):
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p._acc(g[tuple(idx)])

        out._bw = bw
        return out

    def slice_cols(self, a, start, stop):
        av = _val(a)
        out = self.tape._node(av[..., start:stop])

        def bw(g, a=a, av=av, start=start, stop=stop):
            full = np.zeros_like(av)
            full[..., start:stop] = g
            a._acc(full)

        out._bw = bw
        return out

    def repeat_rows(self, a, counts):
        av = _val(a)
        counts = np.asarray(counts)
        out = self.tape._node(np.repeat(av, counts, axis=0))
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))

        def bw(g, a=a, offsets=offsets):
            a._acc(np.add.reduceat(g, offsets, axis=0))

        out._bw = bw
        return out


class NumpyEngine:
    """Engine evaluating the same expressions with no recording."""

    def leaf(self, value):
        return np.asarray(value)

    def matmul(self, a, b):
        return a @ b

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def mul(self, a, b):
        return a * b

    def div(self, a, b):
        return a / b

    def silu(self, a):
        return silu_val(a)

    def gelu(self, a):
        return gelu_val(a)

    def tanh(self, a):
        return tanh_val(a)

    def softplus(self, a):
        return softplus_val(a)

    def exp(self, a):
        return np.exp(a)

    def layer_norm(self, a, gamma, beta, eps=1e-5):
        return layer_norm_val(a, gamma, beta, eps)[0]

    def masked_softmax(self, scores, bias):
        return masked_softmax_val(scores, bias)

    def sum_axis(self, a, axis, keepdims=False):
        return a.sum(axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return a.reshape(shape)

    def transpose(self, a, axes):
        return a.transpose(axes)

    def concat(self, parts, axis=-1):
        return np.concatenate(parts, axis=axis)

    def slice_cols(self, a, start, stop):
        return a[..., start:stop]

    def repeat_rows(self, a, counts):
        return np.repeat(a, np.asarray(counts), axis=0)
