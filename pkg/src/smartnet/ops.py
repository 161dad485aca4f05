"""Differentiable operators used by the network family.

Each operator computes its value with numpy and, when a tape is active and
an input requires a gradient, records a closure that maps the output
gradient to input gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from smartnet import kernels
from smartnet.errors import DimensionError, DomainError
from smartnet.tensor import Tensor, current_tape


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value, dtype=dtype)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _emit(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g, needs):
        return (g * mask,)

    return _emit(x.data * mask, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g, needs):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g, needs):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g, needs):
        return (g.reshape(x.shape),)

    return _emit(x.data.reshape(shape), (x,), backward)


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs: tuple = (x, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g, needs):
        grads = [
            g @ weight.data if needs[0] else None,
            g.T @ x.data if needs[1] else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return grads

    return _emit(out, inputs, backward)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, Ci, H, W) input with a (Co, Ci, k, k) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, ci, h, w = x.shape
    co, wci, k, k2 = weight.shape
    if wci != ci:
        raise DimensionError(f"conv2d: input has {ci} channels, weight expects {wci}")
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    cols = kernels.im2col(x.data, k, stride, padding)
    w_mat = weight.data.reshape(co, -1)
    out = (w_mat @ cols).reshape(co, n, oh, ow).transpose(1, 0, 2, 3)

    def backward(g, needs):
        g_mat = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gx = gw = None
        if needs[0]:
            gx = kernels.col2im(w_mat.T @ g_mat, x.shape, k, stride, padding)
        if needs[1]:
            gw = (g_mat @ cols.T).reshape(weight.shape)
        return gx, gw

    return _emit(np.ascontiguousarray(out), (x, weight), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    In training mode the batch statistics normalize the input and, when
    ``update_stats`` is set, ``running_mean``/``running_var`` are updated in
    place (unbiased variance, exponential moving average with ``momentum``).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if count < 2:
            raise DimensionError("batch_norm: training mode needs N*H*W >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            unbiased = var * (count / (count - 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = (g * xhat).sum(axis=axes)
        if needs[2]:
            gb = g.sum(axis=axes)
        if needs[0]:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                g_sum = g.sum(axis=axes)[None, :, None, None]
                gx_sum = (g * xhat).sum(axis=axes)[None, :, None, None]
                gx = scale * (g - g_sum / count - xhat * gx_sum / count)
            else:
                gx = g * scale
        return gx, gg, gb

    return _emit(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape

    def backward(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _emit(x.data.mean(axis=(2, 3)), (x,), backward)


def shortcut_pad(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling plus zero channel padding."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise DimensionError("shortcut_pad cannot drop channels")
    sub = x.data[:, :, ::stride, ::stride]
    lead = (out_channels - c) // 2
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, lead : lead + c] = sub

    def backward(g, needs):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :, ::stride, ::stride] = g[:, lead : lead + c]
        return (gx,)

    return _emit(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross-entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"label index out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = logsumexp - shifted[rows, labels]
    loss = np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(g, needs):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, labels] -= 1.0
        return ((probs * (g / n)).astype(logits.dtype),)

    return _emit(loss, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
