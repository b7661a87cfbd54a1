"""Temporal aggregation: learnable weighted channel-wise mixing over a
window of neighbouring frames, followed by ReLU.

The forward kernel follows the three-step formulation: (1) scale the frame
batch by each of the r per-channel weight vectors, (2) shift each scaled row
along the time axis (zero padding at the boundaries), (3) sum the rows and
apply ReLU.  ``tam_oracle`` is the direct per-frame transcription of the same
aggregation and exists purely for equivalence testing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, TensorError, _accum, named_rng


@dataclass
class TamParams:
    """r per-channel weight vectors, stored as one (r, C) tensor.

    Row i carries the weight for temporal offset j = i - r//2, i.e. row 0
    weights the frame furthest in the past and row r-1 the frame furthest in
    the future.
    """

    weights: Tensor

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise TensorError(f"TAM weights must be (r, C), got {self.weights.shape}")
        if self.r % 2 == 0:
            raise TensorError(f"temporal range r must be odd, got {self.r}")

    @property
    def r(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]


class FrameBatch:
    """Time-ordered stack of per-frame maps, shape (T, C, H, W)."""

    def __init__(self, tensor: Tensor):
        if tensor.ndim != 4:
            raise TensorError(f"FrameBatch needs a (T, C, H, W) tensor, got {tensor.shape}")
        self.tensor = tensor

    @property
    def num_frames(self) -> int:
        return self.tensor.shape[0]

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def shape(self):
        return self.tensor.shape


def _as_frames(y) -> Tensor:
    return y.tensor if isinstance(y, FrameBatch) else y


def tam_apply(y: Tensor, params: TamParams, frames: int,
              apply_relu: bool = True) -> Tensor:
    """Batched aggregation kernel over (B*T, C, H, W) with T = ``frames``.

    Mixing happens only within each clip of T consecutive entries.
    ``apply_relu`` exists as a test hook for checking pre-activation
    linearity.
    """
    if y.ndim != 4:
        raise TensorError(f"tam expects (N, C, H, W), got {y.shape}")
    n, c, h, w = y.shape
    if params.channels != c:
        raise TensorError(
            f"TAM weights cover {params.channels} channels, input has {c}")
    if frames < 1 or n % frames:
        raise TensorError(f"batch of {n} entries is not a multiple of T={frames}")
    r = params.r
    if r > 2 * frames - 1:
        warnings.warn(
            f"temporal range r={r} exceeds 2T-1={2 * frames - 1}; outer taps only see padding",
            stacklevel=2)

    b = n // frames
    half = r // 2
    wdat = params.weights.data
    v = y.data.reshape(b, frames, c, h, w)
    acc = np.zeros((b, frames, c, h, w), dtype=np.float64)
    # step 1+2: per-offset scaled copies, shifted along the T axis
    for i in range(r):
        j = i - half
        length = frames - abs(j)
        if length <= 0:
            continue
        dst = max(0, -j)
        src = max(0, j)
        acc[:, dst:dst + length] += v[:, src:src + length] * wdat[i][None, None, :, None, None]
    # step 3: column sums are already in acc; apply the activation
    pre = acc.reshape(n, c, h, w)
    out = (np.maximum(pre, 0) if apply_relu else pre).astype(y.dtype)

    mask = (pre > 0) if apply_relu else None

    def bwd(g, y=y, params=params, mask=mask, b=b, frames=frames, r=r, half=half):
        g64 = g.astype(np.float64)
        if mask is not None:
            g64 = g64 * mask
        gv = g64.reshape(b, frames, *y.shape[1:])
        v = y.data.reshape(b, frames, *y.shape[1:])
        if y.requires_grad:
            dy = np.zeros_like(gv)
            for i in range(r):
                j = i - half
                length = frames - abs(j)
                if length <= 0:
                    continue
                dst = max(0, -j)
                src = max(0, j)
                dy[:, src:src + length] += gv[:, dst:dst + length] * \
                    params.weights.data[i][None, None, :, None, None]
            y.grad = _accum(y.grad, dy.reshape(y.shape).astype(y.dtype))
        if params.weights.requires_grad:
            dw = np.zeros_like(params.weights.data, dtype=np.float64)
            for i in range(r):
                j = i - half
                length = frames - abs(j)
                if length <= 0:
                    continue
                dst = max(0, -j)
                src = max(0, j)
                dw[i] = (gv[:, dst:dst + length] * v[:, src:src + length]).sum(axis=(0, 1, 3, 4))
            params.weights.grad = _accum(params.weights.grad,
                                         dw.astype(params.weights.dtype))

    return Tensor._result(out, (y, params.weights), bwd, "tam")


def tam_forward(y, params: TamParams, apply_relu: bool = True):
    """Aggregate one clip: (T, C, H, W) in, same shape out."""
    t = _as_frames(y)
    out = tam_apply(t, params, frames=t.shape[0], apply_relu=apply_relu)
    return FrameBatch(out) if isinstance(y, FrameBatch) else out


def tam_oracle(y, params: TamParams, apply_relu: bool = True):
    """Direct per-frame evaluation of the weighted aggregation.

    Same contract as ``tam_forward``; kept as the independent reference the
    three-step kernel is tested against.
    """
    t = _as_frames(y)
    if t.ndim != 4:
        raise TensorError(f"tam_oracle expects (T, C, H, W), got {t.shape}")
    frames, c, h, w = t.shape
    if params.channels != c:
        raise TensorError(
            f"TAM weights cover {params.channels} channels, input has {c}")
    r = params.r
    half = r // 2
    data = t.data.astype(np.float64)
    wdat = params.weights.data.astype(np.float64)
    out = np.zeros_like(data)
    for ti in range(frames):
        for i in range(r):
            j = i - half
            src = ti + j
            if src < 0 or src >= frames:
                continue  # zero padding outside the clip
            for ch in range(c):
                out[ti, ch] += wdat[i, ch] * data[src, ch]
    if apply_relu:
        out = np.maximum(out, 0)
    res = Tensor(out.astype(t.dtype))
    return FrameBatch(res) if isinstance(y, FrameBatch) else res


def tam_init(channels: int, r: int = 3, scheme: str = "identity",
             seed: int = 0, dtype=np.float32, requires_grad: bool = True,
             name: str = "tam") -> TamParams:
    """Build TAM weights.

    ``identity`` puts 1 on the centre tap so the module starts as a plain
    ReLU pass-through; ``identity+noise`` perturbs every tap with
    N(0, 0.01) draws from a seeded, name-keyed generator.
    """
    if r < 1 or r % 2 == 0:
        raise TensorError(f"temporal range r must be odd and >= 1, got {r}")
    if channels < 1:
        raise TensorError(f"channel count must be >= 1, got {channels}")
    w = np.zeros((r, channels), dtype=dtype)
    w[r // 2] = 1.0
    if scheme == "identity":
        pass
    elif scheme == "identity+noise":
        rng = named_rng(seed, f"{name}.noise")
        w = w + (rng.standard_normal((r, channels)) * 0.1).astype(dtype)
    else:
        raise TensorError(f"unknown TAM init scheme {scheme!r}")
    return TamParams(Tensor(w.astype(dtype), requires_grad=requires_grad))


def tsm_params(channels: int, shift_fraction: float = 0.125, r: int = 3,
               dtype=np.float32) -> TamParams:
    """Fixed one-hot weights reproducing the classic channel-shift scheme.

    The first ``fraction*C`` channels read the next frame, the second group
    reads the previous frame, the remainder pass through (all pre-ReLU).
    """
    if r < 3 or r % 2 == 0:
        raise TensorError(f"channel-shift weights need odd r >= 3, got {r}")
    frac = float(shift_fraction)
    if not (0.0 < frac <= 0.5):
        raise TensorError(f"shift fraction must lie in (0, 1/2], got {shift_fraction}")
    fold = frac * channels
    if abs(fold - round(fold)) > 1e-9 or round(fold) < 1:
        raise TensorError(
            f"shift fraction {shift_fraction} of {channels} channels is not a whole group")
    fold = int(round(fold))
    if 2 * fold > channels:
        raise TensorError(
            f"two shift groups of {fold} channels exceed {channels} total channels")
    half = r // 2
    w = np.zeros((r, channels), dtype=dtype)
    w[half + 1, :fold] = 1.0          # offset +1: read the future frame
    w[half - 1, fold:2 * fold] = 1.0  # offset -1: read the past frame
    w[half, 2 * fold:] = 1.0          # identity for the rest
    return TamParams(Tensor(w))


def channel_shift(y: np.ndarray, fold: int) -> np.ndarray:
    """Reference channel-shift routine on a (T, C, H, W) array.

    Group 0 takes values from t+1, group 1 from t-1, the rest is copied;
    vacated slots are zero.  Matches the published shift convention.
    """
    out = np.zeros_like(y)
    out[:-1, :fold] = y[1:, :fold]
    out[1:, fold:2 * fold] = y[:-1, fold:2 * fold]
    out[:, 2 * fold:] = y[:, 2 * fold:]
    return out
