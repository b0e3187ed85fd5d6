"""Minimal dense-tensor reverse-mode autodiff.

Just enough op coverage to train the toy encoder: matmuls, pointwise
nonlinearities, reductions, layer norm, softmax and cross-entropy.
Training runs in float32; gradient checking should be done in float64
(pass dtype=np.float64 when building the leaf tensors).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "gelu",
    "reparam_relu",
    "log1p",
    "exp",
    "transpose",
    "reshape",
    "max_over_axis",
    "sum_over_axis",
    "mean_over_axis",
    "embedding",
    "masked_fill",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "grad_check",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    """A numpy array plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = _parents
        self.op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        The graph is single-use: a second backward from the same loss
        raises, so there is no silent-accumulation ambiguity. Callers
        zero parameter grads explicitly before each new forward/backward.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph")
        self._consumed = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(data, parents, op, backward):
    out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
    out._backward = backward
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    if not _needs_grad(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", backward)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    if not _needs_grad(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g * c)

    return _make(data, (a,), "scale", backward)


def matmul(a, b):
    """a @ b. Either operand may carry leading batch dims; numpy rules apply."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)
    if not _needs_grad(a, b):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), "matmul", backward)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), "relu", backward)


def _gelu_value(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    # Phi(x) + x * phi(x), exact (erf) form
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(a):
    a = _as_tensor(a)
    data = _gelu_value(a.data).astype(a.dtype, copy=False)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g * _gelu_grad(a.data).astype(a.dtype, copy=False))

    return _make(data, (a,), "gelu", backward)


def reparam_relu(a):
    """Forward identical to relu; backward uses the GeLU derivative.

    Keeps inference (argmax / top-k of downstream scores) unchanged while
    letting gradient flow through negative pre-activations.
    """
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g * _gelu_grad(a.data).astype(a.dtype, copy=False))

    return _make(data, (a,), "reparam_relu", backward)


def log1p(a):
    a = _as_tensor(a)
    data = np.log1p(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g / (1.0 + a.data))

    return _make(data, (a,), "log1p", backward)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), "exp", backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    if not a.requires_grad:
        return Tensor(data)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), "transpose", backward)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), "reshape", backward)


def max_over_axis(a, axis):
    """Max reduction; gradient routes to the first argmax along `axis`."""
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"max_over_axis: empty axis {axis} of shape {a.shape}")
    data = a.data.max(axis=axis)
    if not a.requires_grad:
        return Tensor(data)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis)
        a._accumulate(full)

    return _make(data, (a,), "max_over_axis", backward)


def sum_over_axis(a, axis=None):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(data, (a,), "sum_over_axis", backward)


def mean_over_axis(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_over_axis(a, axis), 1.0 / n)


def embedding(weight, ids):
    """Row lookup: ids of any integer shape -> ids.shape + (d,)."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {weight.shape[0]} rows")
    data = weight.data[ids]
    if not weight.requires_grad:
        return Tensor(data)

    def backward(g):
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        np.add.at(weight.grad, ids.ravel(), g.reshape(-1, weight.shape[1]))

    return _make(data, (weight,), "embedding", backward)


def masked_fill(a, mask, value):
    """Replace entries where mask is True with `value`; mask may broadcast."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accumulate(np.where(mask, 0.0, g))

    return _make(data, (a, ), "masked_fill", backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xmu = a.data - mu
    var = (xmu * xmu).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xmu * invstd
    data = xhat * gain.data + bias.data
    if not _needs_grad(a, gain, bias):
        return Tensor(data)

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(invstd * term)

    return _make(data, (a, gain, bias), "layer_norm", backward)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    if not a.requires_grad:
        return Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a._accumulate(p * (g - dot))

    return _make(p, (a,), "softmax", backward)


def softmax_cross_entropy(logits, targets, weights=None):
    """Mean cross-entropy of (N, V) logits against integer targets (N,).

    `weights` optionally masks/weights rows; the mean is taken over the
    total weight. Returns a scalar tensor.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if weights is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("softmax_cross_entropy: total weight must be positive")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), targets]
    data = np.asarray((w * nll).sum() / wsum, dtype=logits.dtype)
    if not logits.requires_grad:
        return Tensor(data)

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(n), targets] -= 1.0
        logits._accumulate(g * p * (w / wsum)[:, None])

    return _make(data, (logits,), "softmax_cross_entropy", backward)


def grad_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. Run with float64 data for
    trustworthy results. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f(x) is not finite")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy(), dtype=np.float64)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy(), dtype=np.float64)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("grad_check: f(x +/- h) is not finite")
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
