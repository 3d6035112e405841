"""Differentiable operations.

Each function computes its forward value with numpy and registers a backward
closure via :func:`record`. Inputs that are plain arrays are treated as
constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class LabelError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return record("scale", out, (a,), lambda g: (g * g.dtype.type(c),))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return record("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return record("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    # subgradient at exactly 0 is 0
    return record("relu", out, (x,), lambda g: (g * (out > 0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, backward)


# ---------------------------------------------------------------- convolution


def _pad_nhwc(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    n, h, w, c = a.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=a.dtype)
    out[:, p : p + h, p : p + w] = a
    return out


def _im2col(xp: np.ndarray, stride: int) -> np.ndarray:
    """Channels-last patches: rows are output pixels, columns (ky, kx, c)."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    # N×Ho×Wo×C×3×3 -> N×Ho×Wo×3×3×C
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, 9 * c)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, zero padded, no bias. x: N×C×H×W, w: F×C×3×3."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise DimensionError("conv2d: only 3x3 kernels are supported")
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {wc}")
    if stride not in (1, 2):
        raise DimensionError("conv2d: stride must be 1 or 2")
    p = padding
    if p < 0 or h + 2 * p < 3 or wd + 2 * p < 3:
        raise DimensionError("conv2d: padded input must be at least 3x3")
    ho = (h + 2 * p - 3) // stride + 1
    wo = (wd + 2 * p - 3) // stride + 1

    xp = _pad_nhwc(x.data.transpose(0, 2, 3, 1), p)
    cols = _im2col(xp, stride)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(9 * c, f)
    out = (cols @ wmat).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g4 = g.transpose(0, 2, 3, 1)
        g2 = g4.reshape(n * ho * wo, f)
        gw = (cols.T @ g2).reshape(3, 3, c, f).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad and stride == 1 and p == 1:
            # same-size conv: input gradient is a conv of g with the flipped kernel
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(9 * f, c)
            gx = (_im2col(_pad_nhwc(g4, 1), 1) @ wflip).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            gxp = np.zeros_like(xp)
            wk = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # ky, kx, F, C
            for ky in range(3):
                for kx in range(3):
                    gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                        g2 @ wk[ky, kx]
                    ).reshape(n, ho, wo, c)
            gx = gxp[:, p : p + h, p : p + wd].transpose(0, 3, 1, 2)
        return gx, gw

    return record("conv2d", out, (x, w), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        # channels-last broadcast view, matching the conv output layout
        per_pixel = (g / (h * w)).astype(x.dtype, copy=False)[:, None, None, :]
        return (np.broadcast_to(per_pixel, (n, h, w, c)).transpose(0, 3, 1, 2),)

    return record("global_avg_pool", out, (x,), backward)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _channels_last(a: np.ndarray) -> np.ndarray:
    """View (or copy) a 4-d N×C×H×W array as an (N*H*W)×C matrix."""
    return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool = True,
    track: bool = True,
) -> Tensor:
    """Per-feature (2-d input) or per-channel (4-d input) normalization.

    In train mode the batch statistics are used and, when ``track`` is set,
    folded into ``state``. Eval mode uses the running statistics.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise DimensionError(f"batchnorm: {ch} channels but gamma {gamma.shape}, beta {beta.shape}")
    if x.ndim == 4:
        n, _, h, w = x.shape
        to2d = _channels_last
        from2d = lambda a: a.reshape(n, h, w, ch).transpose(0, 3, 1, 2)  # noqa: E731
    else:
        to2d = from2d = lambda a: a  # noqa: E731
    x2 = to2d(x.data)
    m = x2.shape[0]
    gm, bt = gamma.data, beta.data
    eps = x.dtype.type(state.eps)

    if not train:
        invstd = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        xhat = (x2 - state.running_mean.astype(x.dtype)) * invstd

        def backward_eval(g):
            g2 = to2d(g)
            return from2d(g2 * (gm * invstd)), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

        return record("batchnorm", from2d(xhat * gm + bt), (x, gamma, beta), backward_eval)

    if x.shape[0] < 2:
        raise DegenerateBatchError("batchnorm: train mode needs a batch of at least 2")
    ones = np.ones(m, dtype=x.dtype)
    # column sums through a matvec are much faster than .mean(axis=0)
    mean = (ones @ x2) / m
    centered = x2 - mean
    var = np.einsum("ij,ij->j", centered, centered) / m
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered
    xhat *= invstd
    out = xhat * gm
    out += bt

    if track:
        mom = state.momentum
        unbiased = var * (m / (m - 1))
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased

    def backward(g):
        g2 = to2d(g)
        gbeta = ones @ g2
        ggamma = np.einsum("ij,ij->j", g2, xhat)
        # d xhat = g*gamma; dx = invstd/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        k = gm * invstd
        gx = xhat * (-ggamma * k / m)
        gx += g2 * k
        gx -= gbeta * k / m
        return from2d(gx), ggamma, gbeta

    return record("batchnorm", from2d(out), (x, gamma, beta), backward)


# ---------------------------------------------------------------- losses / norms


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise DimensionError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def backward(g):
        probs = np.exp(z - logsum[:, None])
        probs[rows, labels] -= 1
        return (probs * (g / n),)

    return record("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def l2_normalize(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize: expected N×d, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise NormalizationError("l2_normalize: zero-norm row")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return record("l2_normalize", y, (x,), backward)
