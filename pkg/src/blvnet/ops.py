"""Structured NCHW operations: convolution, pooling, resizing, batch norm.

Convolution and the dense products accumulate in 64-bit even for f32 tensors,
which keeps comparisons against the naive-loop oracles tight.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np

from .tensor import Tensor, TensorError, _accum


def _require_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise TensorError(f"{op} expects NCHW input, got shape {x.shape}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, input NCHW, weight OIHW, optional bias of length O."""
    _require_nchw(x, "conv2d")
    if weight.ndim != 4:
        raise TensorError(f"conv2d weight must be OIHW, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise TensorError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {cin_w}")
    if stride < 1:
        raise TensorError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise TensorError(f"conv2d padding must be non-negative, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise TensorError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d produces empty output {ho}x{wo}")
    if bias is not None and bias.shape != (cout,):
        raise TensorError(f"conv2d bias shape {bias.shape} != ({cout},)")

    cols, _, _ = _im2col(x.data, kh, kw, stride, padding)
    cols64 = cols.astype(np.float64)
    wmat64 = weight.data.reshape(cout, -1).astype(np.float64)
    out64 = cols64 @ wmat64.T  # (n*ho*wo, cout)
    if bias is not None:
        out64 += bias.data.astype(np.float64)
    out = out64.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).astype(x.dtype)

    needs_grad = x.requires_grad or weight.requires_grad or (
        bias is not None and bias.requires_grad)
    cols_saved = cols64 if needs_grad else None

    def bwd(g, x=x, weight=weight, bias=bias, cols64=cols_saved,
            stride=stride, padding=padding, hw=(h, w), k=(kh, kw), howo=(ho, wo)):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, weight.shape[0]).astype(np.float64)
        if weight.requires_grad:
            dw = (gmat.T @ cols64).reshape(weight.shape)
            weight.grad = _accum(weight.grad, dw.astype(weight.dtype))
        if bias is not None and bias.requires_grad:
            bias.grad = _accum(bias.grad, gmat.sum(axis=0).astype(bias.dtype))
        if x.requires_grad:
            wmat = weight.data.reshape(weight.shape[0], -1).astype(np.float64)
            dcols = gmat @ wmat  # (n*ho*wo, cin*kh*kw)
            hh, ww = hw
            kh_, kw_ = k
            ho_, wo_ = howo
            n_ = g.shape[0]
            dcols = dcols.reshape(n_, ho_, wo_, x.shape[1], kh_, kw_).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n_, x.shape[1], hh + 2 * padding, ww + 2 * padding), dtype=np.float64)
            for i in range(kh_):
                for j in range(kw_):
                    dxp[:, :, i:i + ho_ * stride:stride, j:j + wo_ * stride:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + hh, padding:padding + ww] if padding else dxp
            x.grad = _accum(x.grad, dx.astype(x.dtype))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bwd, "conv2d")


def depthwise_conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel scaling: out[n,c,h,w] = weight[c] * x[n,c,h,w]."""
    _require_nchw(x, "depthwise_conv1x1")
    if weight.ndim != 1 or weight.shape[0] != x.shape[1]:
        raise TensorError(
            f"depthwise weight of length {weight.shape} does not match {x.shape[1]} channels")
    wcol = weight.data[None, :, None, None]
    out = x.data * wcol

    def bwd(g, x=x, weight=weight):
        if x.requires_grad:
            x.grad = _accum(x.grad, g * weight.data[None, :, None, None])
        if weight.requires_grad:
            dw = (g.astype(np.float64) * x.data).sum(axis=(0, 2, 3))
            weight.grad = _accum(weight.grad, dw.astype(weight.dtype))

    return Tensor._result(out, (x, weight), bwd, "depthwise_conv1x1")


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-center (align-corners-false) 1-D interpolation matrix."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x0 = np.floor(src)
    t = src - x0
    lo = np.clip(x0.astype(int), 0, n_in - 1)
    hi = np.clip(x0.astype(int) + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


def bilinear_resize(x: Tensor, scale: float) -> Tensor:
    """Bilinear scale by exactly x2 or x1/2, half-pixel-center convention."""
    _require_nchw(x, "bilinear_resize")
    if scale not in (2, 2.0, 0.5):
        raise TensorError(f"bilinear_resize supports scale 2 or 0.5, got {scale}")
    n, c, h, w = x.shape
    if scale == 0.5 and (h % 2 or w % 2):
        raise TensorError(f"bilinear downscale requires even spatial dims, got {h}x{w}")
    ho = h * 2 if scale != 0.5 else h // 2
    wo = w * 2 if scale != 0.5 else w // 2
    mh = _interp_matrix(h, ho)
    mw = _interp_matrix(w, wo)
    x64 = x.data.astype(np.float64)
    tmp = np.einsum("oh,nchw->ncow", mh, x64, optimize=True)
    out = np.einsum("pw,ncow->ncop", mw, tmp, optimize=True).astype(x.dtype)

    def bwd(g, x=x, mh=mh, mw=mw):
        if x.requires_grad:
            g64 = g.astype(np.float64)
            tmp = np.einsum("pw,ncop->ncow", mw, g64, optimize=True)
            dx = np.einsum("oh,ncow->nchw", mh, tmp, optimize=True)
            x.grad = _accum(x.grad, dx.astype(x.dtype))

    return Tensor._result(out, (x,), bwd, "bilinear_resize")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                eps: float = 1e-5, momentum: float = 0.1,
                training: bool = False) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    ``running_mean`` / ``running_var`` are plain arrays owned by the layer;
    training mode updates them in place (unbiased variance, standard momentum
    rule: running <- (1-m)*running + m*batch).
    """
    _require_nchw(x, "batchnorm2d")
    c = x.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise TensorError(f"batchnorm2d {name} shape {t.shape} != ({c},)")
    if np.any(running_var < 0):
        raise TensorError("batchnorm2d running variance is negative")

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise TensorError("batchnorm2d training needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=(0, 2, 3))  # biased, used to normalize
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * (var * m / (m - 1)).astype(running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data.astype(np.float64) - mu[None, :, None, None]) * inv[None, :, None, None]
        out = (xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(x.dtype)

        def bwd(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, m=m):
            g64 = g.astype(np.float64)
            if beta.requires_grad:
                beta.grad = _accum(beta.grad, g64.sum(axis=(0, 2, 3)).astype(beta.dtype))
            if gamma.requires_grad:
                dgamma = (g64 * xhat).sum(axis=(0, 2, 3))
                gamma.grad = _accum(gamma.grad, dgamma.astype(gamma.dtype))
            if x.requires_grad:
                gsum = g64.sum(axis=(0, 2, 3))[None, :, None, None]
                gxhat = (g64 * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (gamma.data[None, :, None, None] * inv[None, :, None, None] / m) * (
                    m * g64 - gsum - xhat * gxhat)
                x.grad = _accum(x.grad, dx.astype(x.dtype))

        return Tensor._result(out, (x, gamma, beta), bwd, "batchnorm2d")

    inv = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
    scale = (gamma.data.astype(np.float64) * inv)
    shift = beta.data.astype(np.float64) - running_mean.astype(np.float64) * scale
    out = (x.data * scale[None, :, None, None] + shift[None, :, None, None]).astype(x.dtype)

    def bwd(g, x=x, gamma=gamma, beta=beta, scale=scale, rm=running_mean, inv=inv):
        g64 = g.astype(np.float64)
        if beta.requires_grad:
            beta.grad = _accum(beta.grad, g64.sum(axis=(0, 2, 3)).astype(beta.dtype))
        if gamma.requires_grad:
            xhat = (x.data.astype(np.float64) - rm[None, :, None, None]) * inv[None, :, None, None]
            gamma.grad = _accum(gamma.grad, (g64 * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype))
        if x.requires_grad:
            x.grad = _accum(x.grad, (g64 * scale[None, :, None, None]).astype(x.dtype))

    return Tensor._result(out, (x, gamma, beta), bwd, "batchnorm2d_eval")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    _require_nchw(x, "maxpool2d")
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, padding)
    wo = conv_out_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"maxpool2d produces empty output {ho}x{wo}")
    neg = np.finfo(x.dtype).min
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=neg) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g, x=x, arg=arg, kernel=kernel, stride=stride, padding=padding,
            hw=(h, w), howo=(ho, wo)):
        if not x.requires_grad:
            return
        hh, ww = hw
        ho_, wo_ = howo
        n_, c_ = x.shape[0], x.shape[1]
        dxp = np.zeros((n_, c_, hh + 2 * padding, ww + 2 * padding), dtype=np.float64)
        ki = arg // kernel
        kj = arg % kernel
        ni, ci, oi, oj = np.indices(arg.shape)
        np.add.at(dxp, (ni, ci, oi * stride + ki, oj * stride + kj), g)
        dx = dxp[:, :, padding:padding + hh, padding:padding + ww] if padding else dxp
        x.grad = _accum(x.grad, dx.astype(x.dtype))

    return Tensor._result(out.copy(), (x,), bwd, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Spatial mean, NCHW -> (N, C)."""
    _require_nchw(x, "global_avgpool")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def bwd(g, x=x, hw=hw):
        if x.requires_grad:
            dx = np.broadcast_to((g / hw)[:, :, None, None], x.shape)
            x.grad = _accum(x.grad, dx.astype(x.dtype))

    return Tensor._result(out, (x,), bwd, "global_avgpool")
