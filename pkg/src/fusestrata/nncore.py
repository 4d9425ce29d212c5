"""Minimal reverse-mode tensor engine for the autoencoder's operator set.

Feature maps are single-sample, channel-first arrays ``(C, nx, ny, nz)``.
Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back into them.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor; each graph node is visited once."""
        order, seen = [], set()
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are no longer needed once pushed upstream
                if node._parents:
                    node.grad = None


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True, op="param")


# --------------------------------------------------------------------------
# convolutions

def _check_input(x):
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C, nx, ny, nz) input, got shape {x.shape}")


def conv3d(x, w, b=None, stride=1, padding="same"):
    """Standard 3D cross-correlation, zero "same" padding, stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    _check_input(x)
    if stride != 1 or padding != "same":
        raise ValueError("only stride=1, padding='same' is supported")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.data.ndim != 5 or w.shape[2:] != (k, k, k):
        raise ShapeError(f"weights must be (c_out, c_in, k, k, k), got {w.shape}")
    if cin != x.shape[0]:
        raise ShapeError(f"channel mismatch: weights expect {cin}, input has {x.shape[0]}")
    if k % 2 == 0:
        raise ShapeError(f"'same' padding needs an odd kernel, got k={k}")
    b = as_tensor(np.zeros(cout, dtype=x.dtype) if b is None else b)
    if b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
    out = kernels.conv3d_forward(x.data, w.data.astype(x.dtype, copy=False),
                                 b.data.astype(x.dtype, copy=False))

    def backward(g):
        gx, gw, gb = kernels.conv3d_backward(x.data, w.data.astype(x.dtype, copy=False), g)
        x._accumulate(gx)
        w._accumulate(gw)
        b._accumulate(gb)

    return Tensor(out, parents=(x, w, b), backward=backward, op="conv3d")


def depthwise_conv3d(x, w, b=None, stride=1, padding="same"):
    """Per-channel 3D cross-correlation; weights are (C, k, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_input(x)
    if stride != 1 or padding != "same":
        raise ValueError("only stride=1, padding='same' is supported")
    if w.data.ndim != 4:
        raise ShapeError(f"depthwise weights must be (C, k, k, k), got {w.shape}")
    c, k = w.shape[0], w.shape[1]
    if c != x.shape[0]:
        raise ShapeError(f"channel mismatch: weights have {c}, input has {x.shape[0]}")
    if k % 2 == 0:
        raise ShapeError(f"'same' padding needs an odd kernel, got k={k}")
    b = as_tensor(np.zeros(c, dtype=x.dtype) if b is None else b)
    out = kernels.dwconv3d_forward(x.data, w.data.astype(x.dtype, copy=False),
                                   b.data.astype(x.dtype, copy=False))

    def backward(g):
        gx, gw, gb = kernels.dwconv3d_backward(x.data, w.data.astype(x.dtype, copy=False), g)
        x._accumulate(gx)
        w._accumulate(gw)
        b._accumulate(gb)

    return Tensor(out, parents=(x, w, b), backward=backward, op="depthwise_conv3d")


# --------------------------------------------------------------------------
# resampling

def maxpool3d(x, window=3, stride=2):
    """Max pooling with "same" padding; padded cells never win."""
    x = as_tensor(x)
    _check_input(x)
    out, arg = kernels.maxpool3d_forward(x.data, window, stride)

    def backward(g):
        x._accumulate(kernels.maxpool3d_backward(x.shape, arg, g, x.dtype))

    return Tensor(out, parents=(x,), backward=backward, op="maxpool3d")


def upsample3d(x):
    """Nearest-neighbour 2x upsampling along every spatial axis."""
    x = as_tensor(x)
    _check_input(x)
    out = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        c, nx, ny, nz = x.shape
        x._accumulate(g.reshape(c, nx, 2, ny, 2, nz, 2).sum(axis=(2, 4, 6)))

    return Tensor(out, parents=(x,), backward=backward, op="upsample3d")


# --------------------------------------------------------------------------
# normalisation and pointwise

@dataclass
class BatchNormState:
    """Running statistics; updated in place by training-mode batchnorm."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def fresh(cls, channels, dtype=np.float32, momentum=0.99, eps=1e-3):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm3d(x, gamma, beta, state, training):
    """Per-channel normalisation; statistics over spatial positions (batch of one)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_input(x)
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    flat = x.data.reshape(c, -1)
    gam = gamma.data.astype(x.dtype, copy=False)[:, None]
    bet = beta.data.astype(x.dtype, copy=False)[:, None]
    if training:
        mu = flat.mean(axis=1, dtype=np.float64)
        var = flat.var(axis=1, dtype=np.float64)
        m = state.momentum
        state.mean[...] = m * state.mean + (1.0 - m) * mu
        state.var[...] = m * state.var + (1.0 - m) * var
    else:
        mu = state.mean.astype(np.float64)
        var = state.var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)[:, None]
    xhat = (flat - mu.astype(x.dtype)[:, None]) * inv
    out = (gam * xhat + bet).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(c, -1)
        gamma._accumulate((g2 * xhat).sum(axis=1))
        beta._accumulate(g2.sum(axis=1))
        if not x.requires_grad:
            return
        if training:
            gx = gam * inv * (g2 - g2.mean(axis=1, keepdims=True)
                              - xhat * (g2 * xhat).mean(axis=1, keepdims=True))
        else:
            gx = gam * inv * g2
        x._accumulate(gx.reshape(x.shape))

    return Tensor(out, parents=(x, gamma, beta), backward=backward, op="batchnorm3d")


def elu(x):
    x = as_tensor(x)
    d = x.data
    neg = np.expm1(np.minimum(d, 0))
    out = np.where(d > 0, d, neg)

    def backward(g):
        x._accumulate(g * np.where(d > 0, 1, neg + 1).astype(d.dtype))

    return Tensor(out, parents=(x,), backward=backward, op="elu")


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)

    def backward(g):
        x._accumulate(g * out * (1 - out))

    return Tensor(out, parents=(x,), backward=backward, op="sigmoid")


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors are rescaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    out = x.data * keep

    def backward(g):
        x._accumulate(g * keep)

    return Tensor(out, parents=(x,), backward=backward, op="dropout")


# --------------------------------------------------------------------------
# structural

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor(a.data + b.data, parents=(a, b), backward=backward, op="add")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        for t, piece in zip(tensors, np.split(g, np.cumsum(sizes)[:-1], axis=axis)):
            t._accumulate(piece)

    return Tensor(out, parents=tuple(tensors), backward=backward, op="concat")


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(out, parents=(x,), backward=backward, op="reshape")


def sum_product(x, weights):
    """Scalar <x, weights> with a constant weight array; used to probe gradients."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)

    def backward(g):
        x._accumulate(g * w)

    return Tensor(np.sum(x.data * w), parents=(x,), backward=backward, op="sum_product")


def total(scalars):
    scalars = [as_tensor(s) for s in scalars]

    def backward(g):
        for s in scalars:
            s._accumulate(g)

    return Tensor(sum(s.data for s in scalars), parents=tuple(scalars), backward=backward, op="total")


# --------------------------------------------------------------------------
# loss

BCE_CLAMP = 1e-7


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1-1e-7]."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ShapeError(f"bce shape mismatch {pred.shape} vs {t.shape}")
    p = np.clip(pred.data.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    t64 = t.astype(np.float64)
    n = p.size
    loss = -np.mean(t64 * np.log(p) + (1 - t64) * np.log1p(-p))

    def backward(g):
        inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1 - BCE_CLAMP)
        gp = (-t64 / p + (1 - t64) / (1 - p)) / n * inside
        pred._accumulate((g * gp).astype(pred.dtype))

    return Tensor(np.asarray(loss, dtype=pred.dtype), parents=(pred,), backward=backward, op="bce")


# --------------------------------------------------------------------------
# gradient checking

def numeric_gradient(f, arrays, index, eps=1e-5):
    a = arrays[index]
    g = np.zeros(a.shape, dtype=np.float64)
    flat, gflat = a.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(*arrays))
        flat[i] = orig - eps
        fm = float(f(*arrays))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(op, point, eps=1e-5, floor=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``op`` maps Tensors to a scalar Tensor; ``point`` is a list of float64
    arrays. Per element the error is ``|a - n| / max(|a|, |n|, floor * scale)``
    with ``scale`` the largest numeric gradient magnitude over all inputs, so
    entries that are zero up to rounding (a bias feeding batchnorm, say) do
    not dominate.
    """
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in point]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f(*arrs):
        return op(*[Tensor(a) for a in arrs]).data

    numeric = [numeric_gradient(f, arrays, i, eps) for i in range(len(arrays))]
    scale = max([np.abs(n).max(initial=0.0) for n in numeric] + [1.0])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
        worst = max(worst, float(np.max(np.abs(a - n) / denom, initial=0.0)))
    return worst
