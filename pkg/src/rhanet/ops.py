"""Forward/backward rules for the network primitives.

All image tensors are N x C x H x W. Convolution is cross-correlation (the
kernel is not flipped), which matters only when importing weights from
elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N x C x H x W tensor, got shape {x.shape}")


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{axis} extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation, weight C_out x C_in x k x k."""
    _check_4d(x, "conv2d")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight {weight.shape} expects {wcin}")
    ho = _out_extent(h, kh, stride, padding, "height")
    wo = _out_extent(w, kw, stride, padding, "width")
    xp = _pad(x.data, padding)
    wd = weight.data
    s = stride
    out = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    # One matmul per kernel tap keeps memory at O(input) instead of im2col's O(k^2 * input).
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            out += np.tensordot(wd[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)  # C_out x N x H' x W'
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                if gx is not None:
                    gx[sl] += np.tensordot(wd[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(gt, xp[sl], axes=([1, 2, 3], [0, 2, 3]))
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def _channel_blocks(c: int, plane: int, budget: int = 1 << 16):
    """Channel slices whose working set stays cache-sized."""
    step = max(1, budget // max(plane, 1))
    return [slice(c0, min(c0 + step, c)) for c0 in range(0, c, step)]


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: Optional[int] = None) -> Tensor:
    """Per-channel k x k cross-correlation, weight C x 1 x k x k, stride 1."""
    _check_4d(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, weight shape {weight.shape}")
    k = weight.shape[2]
    p = (k - 1) // 2 if padding is None else padding
    ho = _out_extent(h, k, 1, p, "height")
    wo = _out_extent(w, k, 1, p, "width")
    xp = _pad(x.data, p)
    wd = weight.data[:, 0]  # C x k x k
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for sl in _channel_blocks(c, ho * wo * n):
        o = out[:, sl]
        tmp = np.empty_like(o)
        for i in range(k):
            for j in range(k):
                np.multiply(xp[:, sl, i : i + ho, j : j + wo], wd[sl, i, j].reshape(1, -1, 1, 1), out=tmp)
                o += tmp

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for sl in _channel_blocks(c, ho * wo * n):
            gs = g[:, sl]
            for i in range(k):
                for j in range(k):
                    gx[:, sl, i : i + ho, j : j + wo] += gs * wd[sl, i, j].reshape(1, -1, 1, 1)
                    gw[sl, 0, i, j] = (gs * xp[:, sl, i : i + ho, j : j + wo]).sum(axis=(0, 2, 3))
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return gx, gw

    return Tensor.from_op(out, (x, weight), bw)


@dataclass
class BatchNormState:
    """Learnable affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm2d(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel normalisation followed by gamma/beta.

    Training mode normalises with biased batch statistics and folds the
    unbiased batch variance into ``running_var``.
    """
    _check_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if s.gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: input has {c} channels, state has {s.gamma.shape[0]}")
    gamma = s.gamma.data.reshape(1, c, 1, 1)
    beta = s.beta.data.reshape(1, c, 1, 1)

    if not s.training:
        scale = (s.gamma.data / np.sqrt(s.running_var + s.eps)).reshape(1, c, 1, 1)
        shift = beta - s.running_mean.reshape(1, c, 1, 1) * scale
        out = (x.data * scale + shift).astype(x.dtype, copy=False)

        def bw_eval(g):
            xhat = (x.data - s.running_mean.reshape(1, c, 1, 1)) / np.sqrt(s.running_var.reshape(1, c, 1, 1) + s.eps)
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor.from_op(out, (x, s.gamma, s.beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ValueError("batchnorm2d in training mode needs at least 2 values per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + s.eps)
    xhat = xc * inv
    out = gamma * xhat + beta

    mom = s.momentum
    s.running_mean[...] = (1 - mom) * s.running_mean + mom * mu.reshape(c)
    s.running_var[...] = (1 - mom) * s.running_var + mom * var.reshape(c) * (m / (m - 1))

    def bw(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, (x, s.gamma, s.beta), bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    _check_4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h} x {w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """2n x n linear map for x2 bilinear resampling along one axis.

    Output index i samples source coordinate (i + 0.5) / 2 - 0.5, clamped to
    [0, n - 1] (half-pixel centres).
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1 - frac
        m[i, i1] += frac
    return m


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    _check_4d(x, "bilinear_upsample_x2")
    n, c, h, w = x.shape
    ah = upsample_matrix(h, x.dtype)
    aw = upsample_matrix(w, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
    return Tensor.from_op(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))

