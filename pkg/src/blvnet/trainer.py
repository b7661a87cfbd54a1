"""Optimizer, schedule, loss, and the desk-scale temporal-modeling
experiment.

Training is single-threaded and every random draw is keyed on the config
seed, so a full run is bitwise reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arch import ArchSpec
from .dataio import ClipSource, clips_to_batch
from .network import Network, build_network, save_checkpoint, load_checkpoint
from .tensor import Tensor, TensorError, _accum, named_rng


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborted with diagnostics."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    epochs: int = 12
    milestones: Tuple[int, ...] = ()
    lr_decay: float = 10.0
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.lr_decay <= 0:
            raise ValueError(f"lr_decay must be positive, got {self.lr_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Base learning rate divided by decay^(milestones passed)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr / (cfg.lr_decay ** passed)


class SgdNesterov:
    """SGD with momentum, L2 weight decay, and optional lookahead update.

    v <- mu*v + (g + lambda*theta)
    theta <- theta - lr * (g + lambda*theta + mu*v)   (nesterov)
    theta <- theta - lr * v                            (plain momentum)
    """

    def __init__(self, params: Sequence[Tuple[str, Tensor]], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        mu = self.cfg.momentum
        lam = self.cfg.weight_decay
        for name, p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise TensorError(
                    f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            g = p.grad + lam * p.data
            v = self.state.setdefault(name, np.zeros_like(p.data))
            v *= mu
            v += g
            if self.cfg.nesterov:
                p.data = p.data - lr * (g + mu * v)
            else:
                p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def sgd_nesterov_step(params: Sequence[Tuple[str, Tensor]],
                      state: Dict[str, np.ndarray], cfg: TrainConfig,
                      lr: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Functional single step over (name, tensor) pairs with .grad set."""
    opt = SgdNesterov(params, cfg)
    opt.state = state
    opt.step(cfg.lr if lr is None else lr)
    return opt.state


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy in log-sum-exp form, fused softmax backward."""
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    if logits.ndim != 2:
        raise TensorError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape[0] != b:
        raise TensorError(f"{labels.shape[0]} labels for a batch of {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise TensorError(f"label out of range [0, {k}): {labels}")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    losses = lse[:, 0] - z[np.arange(b), labels]
    out = np.asarray(losses.mean(), dtype=logits.dtype).reshape(())

    def bwd(g, logits=logits, labels=labels, z=z, lse=lse, b=b):
        if logits.requires_grad:
            soft = np.exp(z - lse)
            soft[np.arange(b), labels] -= 1.0
            logits.grad = _accum(logits.grad, (soft * (float(g) / b)).astype(logits.dtype))

    return Tensor._result(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# toy experiment


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    variant: str
    epochs: List[EpochStats] = field(default_factory=list)
    checkpoint: Optional[str] = None

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1].val_acc if self.epochs else 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "final_val_acc": self.final_val_acc,
            "checkpoint": self.checkpoint,
            "epochs": [vars(e) for e in self.epochs],
        }


def _forward_clips(net: Network, clips: Sequence[ClipSource], training: bool) -> Tensor:
    x, _ = clips_to_batch(clips)
    frames = clips[0].num_frames
    return net.forward(Tensor(x.astype(net.dtype)), frames=frames, training=training)


def evaluate(net: Network, clips: Sequence[ClipSource], batch_size: int = 32) -> float:
    """Top-1 accuracy over a clip list."""
    correct = 0
    for i in range(0, len(clips), batch_size):
        chunk = clips[i:i + batch_size]
        logits = _forward_clips(net, chunk, training=False)
        pred = logits.data.argmax(axis=1)
        labels = np.array([c.label for c in chunk])
        correct += int((pred == labels).sum())
    return correct / len(clips)


def train_network(net: Network, train_clips: Sequence[ClipSource],
                  val_clips: Sequence[ClipSource], cfg: TrainConfig,
                  log_path=None) -> List[EpochStats]:
    """Train one network; returns per-epoch stats and optionally writes the
    CSV log (epoch, lr, train_loss, train_acc, val_acc)."""
    opt = SgdNesterov(net.named_params(), cfg)
    stats: List[EpochStats] = []
    order_rng_base = cfg.seed
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = named_rng(order_rng_base, f"epoch:{epoch}").permutation(len(train_clips))
        total_loss = 0.0
        total_correct = 0
        seen = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_clips[j] for j in order[i:i + cfg.batch_size]]
            x, labels = clips_to_batch(batch)
            opt.zero_grad()
            logits = net.forward(Tensor(x.astype(net.dtype)),
                                 frames=batch[0].num_frames, training=True)
            loss = cross_entropy(logits, labels)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at epoch {epoch}, step {i // cfg.batch_size} "
                    f"(lr={lr}); rerun with a lower learning rate")
            loss.backward()
            opt.step(lr)
            total_loss += loss_val * len(batch)
            total_correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(batch)
        val_acc = evaluate(net, val_clips) if len(val_clips) else 0.0
        stats.append(EpochStats(epoch=epoch, lr=lr,
                                train_loss=total_loss / max(seen, 1),
                                train_acc=total_correct / max(seen, 1),
                                val_acc=val_acc))
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
            for s in stats:
                writer.writerow([s.epoch, f"{s.lr:g}", f"{s.train_loss:.6f}",
                                 f"{s.train_acc:.4f}", f"{s.val_acc:.4f}"])
    return stats


DEFAULT_TOY_VARIANTS = ("tsn", "blvnet", "blvnet-tam")


def train_toy(variants: Sequence[str], train_clips: Sequence[ClipSource],
              val_clips: Sequence[ClipSource], cfg: TrainConfig,
              out_dir=None, input_size: int = 32,
              num_classes: int = 2) -> Dict[str, TrainResult]:
    """Train tiny-backbone variants with identical seeds and budget.

    Every variant starts from the same name-keyed initialization, so shared
    layers begin with identical weights.
    """
    frames = train_clips[0].num_frames
    if frames % 2:
        raise ValueError("toy clips must have an even frame count")
    out = {}
    for variant in variants:
        spec = ArchSpec(variant=variant, backbone_depth="tiny",
                        n_pairs=frames // 2, num_classes=num_classes,
                        input_size=input_size)
        net = build_network(spec, seed=cfg.seed, dtype=np.float32)
        log_path = None
        ckpt_path = None
        if out_dir is not None:
            out_path = Path(out_dir)
            out_path.mkdir(parents=True, exist_ok=True)
            log_path = out_path / f"{variant}-tiny.csv"
            ckpt_path = out_path / f"{variant}-tiny.ckpt"
        stats = train_network(net, train_clips, val_clips, cfg, log_path=log_path)
        result = TrainResult(variant=variant, epochs=stats)
        if ckpt_path is not None:
            save_checkpoint(net, ckpt_path)
            result.checkpoint = str(ckpt_path)
        out[variant] = result
    return out


def finetune_longer(checkpoint_path, n_pairs: int,
                    train_clips: Sequence[ClipSource],
                    val_clips: Sequence[ClipSource], cfg: TrainConfig,
                    log_path=None) -> Tuple[Network, List[EpochStats]]:
    """Progressive training: load a shorter-input checkpoint and continue on
    longer clips.  Weights are time-invariant, so only the spec changes."""
    net, _ = load_checkpoint(checkpoint_path)
    net.spec = replace(net.spec, n_pairs=n_pairs)
    stats = train_network(net, train_clips, val_clips, cfg, log_path=log_path)
    return net, stats
