"""Independent reference implementations used only by the tests.

Everything here is written as directly as possible (nested loops, explicit
formulas) so the fast production kernels are checked against code with no
shared structure.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    """Six-nested-loop convolution, NCHW / OIHW."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, oy * stride + ky, ox * stride + kx]
                                        * w[co, ci, ky, kx])
                    if b is not None:
                        acc += b[co]
                    out[ni, co, oy, ox] = acc
    return out


def depthwise_scale_loops(x, w):
    """Per-channel scaling via explicit loops (the channel-wise product)."""
    out = np.zeros_like(x, dtype=np.float64)
    n, c, h, wd = x.shape
    for ni in range(n):
        for ci in range(c):
            out[ni, ci] = w[ci] * x[ni, ci]
    return out


def bilinear_point(src: np.ndarray, coord: float) -> np.ndarray:
    """1-D linear interpolation with edge clamping at a fractional index."""
    n = src.shape[0]
    lo = int(np.floor(coord))
    t = coord - lo
    lo_c = min(max(lo, 0), n - 1)
    hi_c = min(max(lo + 1, 0), n - 1)
    return (1.0 - t) * src[lo_c] + t * src[hi_c]


def bilinear_resize_formula(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct half-pixel-center interpolation of one 2-D map."""
    h, w = img.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        rows = np.array([bilinear_point(img[:, x], sy) for x in range(w)])
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            out[oy, ox] = bilinear_point(rows, sx)
    return out


def tam_direct(y, weights, apply_relu=True):
    """Direct windowed aggregation: out_t = relu(sum_j w_j * y_{t+j})."""
    t, c, h, w = y.shape
    r = weights.shape[0]
    half = r // 2
    out = np.zeros((t, c, h, w), dtype=np.float64)
    for ti in range(t):
        for i in range(r):
            j = i - half
            if 0 <= ti + j < t:
                for ci in range(c):
                    out[ti, ci] += weights[i, ci] * y[ti + j, ci]
    if apply_relu:
        out = np.maximum(out, 0.0)
    return out


def maxpool_loops(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[ni, ci, oy, ox] = xp[ni, ci,
                                             oy * stride:oy * stride + k,
                                             ox * stride:ox * stride + k].max()
    return out
