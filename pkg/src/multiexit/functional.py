"""Differentiable layer and loss functions on NCHW tensors."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _wrap


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) strided view, no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(cols: np.ndarray, shape: Tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, Ho, Wo, k, k) window gradients back onto a padded input."""
    n, c, ho, wo = cols.shape[:4]
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        weight: kernel of shape (O, C, K, K).
        bias: optional (O,) offsets.
        stride: positive step.
        padding: zero padding on every spatial border.

    Returns:
        Tensor of shape (N, O, Ho, Wo) with Ho = (H + 2p - K) // stride + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, weight expects I={ci}")
    if k != k2:
        raise ValueError(f"conv2d needs square kernels, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} or padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"kernel {k}x{k} does not fit padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = weight.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("nchw,oc->nohw", cols, wd[:, :, 0, 0], optimize=True)
    else:
        cols = _windows(xp, k, stride, ho, wo)
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gsub = np.einsum("nohw,oc->nchw", g, wd[:, :, 0, 0], optimize=True)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                gxp[:, :, : stride * ho : stride, : stride * wo : stride] = gsub
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gx = None
            if x.requires_grad:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, k, k
                gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
                gxp = _col2im(gcols, xp.shape, k, stride)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place by an exponential moving average (unbiased
    variance, as is customary). Eval mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d parameters sized {gamma.shape} for C={c}")
    xd = x.data
    if training:
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs batch size >= 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= 1 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * var * m / max(m - 1, 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gd, bd = gamma.data, beta.data
    out = xhat * gd.reshape(1, c, 1, 1) + bd.reshape(1, c, 1, 1)

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd.reshape(1, c, 1, 1)
        if training:
            m = n * h * w
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; the gradient goes to the first maximal position of each window."""
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(f"pool window {kernel} larger than padded input {x.shape}")
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(w, kernel, stride, padding)
    xd = x.data
    xp = (np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                 constant_values=-np.inf) if padding else xd)
    win = _windows(xp, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        onehot = (np.arange(kernel * kernel) == idx[..., None]) * g[..., None]
        gxp = _col2im(onehot.reshape(n, c, ho, wo, kernel, kernel).astype(g.dtype),
                      xp.shape, kernel, stride)
        return (gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,),
                           lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data

    def backward(g: np.ndarray):
        grads = (g @ wd, g.T @ xd)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / tau``."""
    _check_tau(tau)
    p = np.exp(_log_softmax_np(logits.data / tau))

    def backward(g: np.ndarray):
        return ((p * (g - (g * p).sum(axis=1, keepdims=True))) / tau,)

    return Tensor._from_op(p, (logits,), backward)


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    ls = _log_softmax_np(logits.data / tau)
    p = np.exp(ls)

    def backward(g: np.ndarray):
        return ((g - p * g.sum(axis=1, keepdims=True)) / tau,)

    return Tensor._from_op(ls, (logits,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def backward(g: np.ndarray):
        grad = np.exp(ls)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_divergence(teacher_logits: Tensor, student_logits: Tensor, tau: float = 1.0) -> Tensor:
    """Batch-mean KL(softmax(teacher/tau) || softmax(student/tau)).

    The teacher distribution is the reference; gradients flow into both
    arguments unless the caller detaches the teacher.
    """
    _check_tau(tau)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"KL shape mismatch {teacher_logits.shape} vs {student_logits.shape}")
    n = teacher_logits.shape[0]
    lt = _log_softmax_np(teacher_logits.data / tau)
    ls = _log_softmax_np(student_logits.data / tau)
    pt, ps = np.exp(lt), np.exp(ls)
    kl = (pt * (lt - ls)).sum() / n

    def backward(g: np.ndarray):
        c = g / (n * tau)
        # d/dz_s: ps - pt ; d/dz_t: pt * ((lt - ls) - KL_row)
        gs = (ps - pt) * c
        row = (pt * (lt - ls)).sum(axis=1, keepdims=True)
        gt = pt * ((lt - ls) - row) * c
        return gt, gs

    return Tensor._from_op(np.asarray(kl, dtype=student_logits.dtype),
                           (teacher_logits, student_logits), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; ``target`` carries no gradient."""
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return Tensor._from_op(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,),
                           lambda g: (diff * (2.0 * g / n),))
