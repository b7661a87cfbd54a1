"""Frame sampling, preprocessing, augmentation, clip containers, and the
synthetic temporal benchmark.

All randomness flows through explicit seeds; two runs with equal seeds
produce byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ops import _interp_matrix
from .tensor import load_array, named_rng, save_array


class DataError(ValueError):
    """Invalid sampling, preprocessing or container input."""


# ---------------------------------------------------------------------------
# uniform segment sampling


@dataclass
class SamplePlan:
    n: int
    indices: List[int]
    mode: str

    def __post_init__(self):
        if len(self.indices) != self.n:
            raise DataError(f"plan lists {len(self.indices)} indices for {self.n} segments")


def uniform_sample(num_frames: int, n: int, mode: str = "infer",
                   seed: int = 0) -> SamplePlan:
    """One index per uniform segment: random within the segment for training,
    the segment centre at inference.  Videos shorter than ``n`` clamp and
    repeat indices."""
    if n <= 0:
        raise DataError(f"segment count must be positive, got {n}")
    if num_frames < 1:
        raise DataError(f"video must have at least one frame, got {num_frames}")
    if mode not in ("train", "infer"):
        raise DataError(f"mode must be 'train' or 'infer', got {mode!r}")
    rng = named_rng(seed, f"uniform_sample:{num_frames}:{n}") if mode == "train" else None
    indices: List[int] = []
    for i in range(n):
        start = (i * num_frames) // n
        end = ((i + 1) * num_frames) // n
        if end <= start:  # short video: repeat the nearest valid frame
            indices.append(min(start, num_frames - 1))
        elif mode == "infer":
            indices.append((start + end - 1) // 2)
        else:
            indices.append(int(rng.integers(start, end)))
    return SamplePlan(n=n, indices=indices, mode=mode)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessConfig:
    resize: int = 256            # target for the smaller side
    square: bool = False         # resize to resize x resize instead
    crop: int = 224
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.crop > self.resize:
            raise DataError(f"crop {self.crop} larger than resize target {self.resize}")


def load_preprocess_config(path) -> PreprocessConfig:
    """Parse a key=value config file (resize/crop/normalization constants)."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    base = PreprocessConfig()
    return PreprocessConfig(
        resize=int(values.get("resize", base.resize)),
        square=values.get("square", "false").lower() in ("1", "true", "yes"),
        crop=int(values.get("crop", base.crop)),
        mean=_parse_triple(values.get("mean"), base.mean),
        std=_parse_triple(values.get("std"), base.std),
    )


def save_preprocess_config(path, cfg: PreprocessConfig) -> None:
    lines = [
        f"resize={cfg.resize}",
        f"square={'true' if cfg.square else 'false'}",
        f"crop={cfg.crop}",
        "mean=" + ",".join(f"{v:g}" for v in cfg.mean),
        "std=" + ",".join(f"{v:g}" for v in cfg.std),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_triple(text: Optional[str], default) -> Tuple[float, float, float]:
    if text is None:
        return default
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise DataError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWxC float image, half-pixel-center convention."""
    if img.ndim != 3:
        raise DataError(f"resize_image expects HxWxC, got shape {img.shape}")
    h, w, _ = img.shape
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)
    tmp = np.einsum("oh,hwc->owc", mh, img.astype(np.float64), optimize=True)
    return np.einsum("pw,owc->opc", mw, tmp, optimize=True)


def _as_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"expected an HxWxC image of at least 1x1, got shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[2] != 3:
        raise DataError(f"expected 1 or 3 channels, got {img.shape[2]}")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    return img


def _scaled_size(h: int, w: int, target: int) -> Tuple[int, int]:
    if h <= w:
        return target, int(round(w * target / h))
    return int(round(h * target / w)), target


def preprocess_infer(image: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Resize (smaller side to the target, aspect preserved), center-crop,
    scale to [0,1] and normalize.  Returns a (3, crop, crop) float32 array."""
    img = _as_float_image(image)
    h, w, _ = img.shape
    if cfg.square:
        nh = nw = cfg.resize
    else:
        nh, nw = _scaled_size(h, w, cfg.resize)
    img = resize_image(img, nh, nw)
    top = (nh - cfg.crop) // 2
    left = (nw - cfg.crop) // 2
    img = img[top:top + cfg.crop, left:left + cfg.crop]
    mean = np.asarray(cfg.mean, dtype=np.float64)
    std = np.asarray(cfg.std, dtype=np.float64)
    out = (img - mean) / std
    return out.transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# training augmentation (shared transform across all frames of a clip)

JITTER_SCALES = (1.0, 0.875, 0.75, 0.65625)


@dataclass
class AugmentParams:
    crop: int
    top: int
    left: int
    flip: bool


def sample_augment_params(seed: int, h: int, w: int,
                          scales: Sequence[float] = JITTER_SCALES) -> AugmentParams:
    """Draw one spatial-jitter configuration from a seed."""
    rng = named_rng(seed, "augment")
    short = min(h, w)
    crop = max(1, int(round(short * scales[int(rng.integers(len(scales)))])))
    crop = min(crop, short)
    top = int(rng.integers(h - crop + 1))
    left = int(rng.integers(w - crop + 1))
    flip = bool(rng.integers(2))
    return AugmentParams(crop=crop, top=top, left=left, flip=flip)


def hflip(frames: np.ndarray) -> np.ndarray:
    """Horizontal flip of (T, H, W, C) frames."""
    return frames[:, :, ::-1].copy()


def augment_train(frames: np.ndarray, seed: int,
                  cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Multi-scale crop + optional flip, the same transform for every frame.

    Input (T, H, W, C) uint8; output (T, 3, crop, crop) float32, normalized.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise DataError(f"augment_train expects (T, H, W, C), got {frames.shape}")
    t, h, w, _ = frames.shape
    p = sample_augment_params(seed, h, w)
    if p.flip:
        frames = hflip(frames)
    out = np.empty((t, 3, cfg.crop, cfg.crop), dtype=np.float32)
    mean = np.asarray(cfg.mean, dtype=np.float64)
    std = np.asarray(cfg.std, dtype=np.float64)
    for i in range(t):
        img = _as_float_image(frames[i])
        patch = img[p.top:p.top + p.crop, p.left:p.left + p.crop]
        patch = resize_image(patch, cfg.crop, cfg.crop)
        out[i] = ((patch - mean) / std).transpose(2, 0, 1).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# clip container


@dataclass
class ClipSource:
    """Desk-scale clip: frames held as (T, H, W, 3) uint8 plus metadata."""

    clip_id: str
    label: int
    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise DataError(f"clip frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise DataError(f"clip frames must be uint8, got {self.frames.dtype}")
        if self.num_frames < 1:
            raise DataError("clip needs at least one frame")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def frame(self, i: int) -> np.ndarray:
        return self.frames[i]


MANIFEST_NAME = "manifest.tsv"


def save_clips(directory, clips: Sequence[ClipSource]) -> Path:
    """Write clips as directories of numbered binary frame tensors plus a
    tab-separated manifest: clip_id, label, num_frames, path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in clips:
        sub = root / clip.clip_id
        sub.mkdir(exist_ok=True)
        for i in range(clip.num_frames):
            save_array(sub / f"frame_{i:05d}.tns", clip.frames[i])
        lines.append(f"{clip.clip_id}\t{clip.label}\t{clip.num_frames}\t{clip.clip_id}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_clips(manifest_path) -> List[ClipSource]:
    manifest = Path(manifest_path)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    clips = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise DataError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        clip_id, label_s, count_s, rel = parts
        try:
            label, count = int(label_s), int(count_s)
        except ValueError as e:
            raise DataError(f"{manifest}:{lineno}: bad label or frame count") from e
        sub = root / rel
        frames = []
        for i in range(count):
            path = sub / f"frame_{i:05d}.tns"
            if not path.exists():
                raise DataError(f"missing frame file {path}")
            frames.append(load_array(path))
        clips.append(ClipSource(clip_id=clip_id, label=label,
                                frames=np.stack(frames)))
    return clips


# ---------------------------------------------------------------------------
# synthetic temporal benchmark

MOTION_CLASSES = ("left", "right")


@dataclass
class MotionTaskConfig:
    size: int = 32          # square frames, size x size
    square: int = 10        # bright square edge length
    step_within: int = 4    # displacement magnitude inside a frame pair
    within_flip: float = 1 / 3   # chance the within-pair step opposes the label
    step_across: int = 6    # clean drift between consecutive pairs
    background: int = 96    # background noise amplitude (uint8 levels)
    brightness: int = 230   # square pixel value


def synth_motion_dataset(num_clips: int, frames: int = 8,
                         config: MotionTaskConfig = MotionTaskConfig(),
                         seed: int = 0) -> List[ClipSource]:
    """Clips of a bright square drifting left or right over noise.

    Positions wrap around, the start position is uniform, and appearance is
    identical for both classes, so any single frame carries no label
    information.  The within-pair displacement has a fixed magnitude and a
    noisy sign (it matches the label with probability 1 - within_flip), so a
    model that only fuses adjacent pairs faces a hard information ceiling.
    The pair-to-pair displacement is clean: temporal context beyond the pair
    resolves the direction almost surely.
    """
    if frames < 2:
        raise DataError(f"motion clips need at least 2 frames, got {frames}")
    rng = named_rng(seed, "synth_motion")
    clips = []
    c = config
    for n in range(num_clips):
        label = int(rng.integers(2))
        d = 1 if label == 1 else -1
        pos = int(rng.integers(c.size))
        positions = [pos]
        for t in range(frames - 1):
            if t % 2 == 0:  # within a pair: fixed magnitude, noisy sign
                sign = -d if rng.random() < c.within_flip else d
                step = sign * c.step_within
            else:           # across pair boundary: clean drift
                step = d * c.step_across
            pos = (pos + step) % c.size
            positions.append(pos)
        clip = np.empty((frames, c.size, c.size, 3), dtype=np.uint8)
        row0 = (c.size - c.square) // 2
        for t in range(frames):
            noise = rng.integers(0, c.background, (c.size, c.size),
                                 dtype=np.int64).astype(np.uint8)
            frame = noise
            cols = (np.arange(c.square) + positions[t]) % c.size
            frame[row0:row0 + c.square, cols] = c.brightness
            clip[t] = frame[:, :, None]
        clips.append(ClipSource(clip_id=f"clip{n:05d}", label=label, frames=clip,
                                meta={"positions": positions,
                                      "direction": d}))
    return clips


def unwrap_steps(positions: Sequence[int], size: int) -> List[int]:
    """Per-frame displacements recovered mod the frame width."""
    steps = []
    for a, b in zip(positions, positions[1:]):
        steps.append(((b - a + size // 2) % size) - size // 2)
    return steps


def clips_to_batch(clips: Sequence[ClipSource]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack clips into a normalized (B*T, 3, H, W) float32 batch + labels."""
    if not clips:
        raise DataError("empty clip batch")
    frames = np.concatenate([c.frames for c in clips], axis=0)
    x = frames.astype(np.float32) / 255.0
    x = (x - 0.5) / 0.25
    x = x.transpose(0, 3, 1, 2)
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return np.ascontiguousarray(x), labels
