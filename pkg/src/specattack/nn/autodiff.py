"""Tape-free reverse-mode autodiff over numpy arrays.

Every ``Tensor`` produced by an operation keeps references to its parents and
a closure that maps the output adjoint to parent adjoints.  ``backward`` walks
the graph in reverse topological order.  All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a, shape):
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def tsum(a, axis=None):
    orig = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, orig).copy(),)

    return _result(a.data.sum(axis=axis), (a,), back)


def tmean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


_relu_trace = None


class trace_relu_masks:
    """Context manager collecting every ReLU activation mask computed inside it.

    Finite-difference checks use it to discard coordinates whose stencil
    crosses a kink of the piecewise-linear network.
    """

    def __enter__(self):
        global _relu_trace
        self.masks = []
        self._prev, _relu_trace = _relu_trace, self.masks
        return self.masks

    def __exit__(self, *exc):
        global _relu_trace
        _relu_trace = self._prev
        return False


def relu(a):
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def take_rows(a, index):
    """Select ``a[arange(n), index]`` from a 2D tensor."""
    rows = np.arange(a.shape[0])
    index = np.asarray(index)

    def back(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _result(a.data[rows, index], (a,), back)


def log_softmax(logits):
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(logits):
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _result(p, (logits,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def cross_entropy(logits, labels, reduction="mean"):
    """Negative log-likelihood of integer ``labels`` under softmax(logits)."""
    nll = neg(take_rows(log_softmax(logits), labels))
    if reduction == "mean":
        return tmean(nll)
    if reduction == "sum":
        return tsum(nll)
    return nll


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation on channels-last input.

    ``x`` is (B, H, W, C), ``w`` is (kh, kw, C, O); output is (B, Ho, Wo, O).
    """
    B, H, W, C = x.shape
    kh, kw, Cw, O = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, ::s, ::s][:, :Ho, :Wo]).reshape(-1, C)
    else:
        # view is (B, Ho, Wo, C, kh, kw); reorder so each patch row is (kh, kw, C)
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * C)
    wmat = w.data.reshape(-1, O)
    out = cols @ wmat
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gm = g.reshape(-1, O)
        gw = (cols.T @ gm).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, i, j]
            gx = gxp[:, p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result(out.reshape(B, Ho, Wo, O), parents, back)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization for channels-last input.

    In training mode the batch statistics are used and the running buffers
    are updated in place; otherwise the frozen running statistics are used.
    """
    axes = tuple(range(x.ndim - 1))
    m = x.data.size / x.shape[-1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _result(out, (x, gamma, beta), back)


def global_avg_pool(x):
    """Mean over the spatial axes of a (B, H, W, C) tensor."""
    B, H, W, C = x.shape
    return _result(
        x.data.mean(axis=(1, 2)),
        (x,),
        lambda g: (np.broadcast_to(g[:, None, None, :] / (H * W), x.shape).copy(),),
    )
