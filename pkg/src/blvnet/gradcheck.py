"""Finite-difference gradient verification.

The checker evaluates a loss closure twice per sampled coordinate (central
differences) and compares against the gradients deposited by one backward
pass.  The closure must rebuild the graph from the same leaf tensors on every
call; only forward evaluation is used on the perturbed points, so the check
stays independent of the backward implementation it verifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, named_rng


@dataclass
class GroupResult:
    name: str
    checked: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    tol: float
    step: float
    groups: List[GroupResult] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "step": self.step,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "groups": [
                {"name": g.name, "checked": g.checked, "max_rel_err": g.max_rel_err}
                for g in self.groups
            ],
        }


def _rel_err(a: float, n: float) -> float:
    # absolute error below magnitude 1, relative above
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradcheck(loss_fn: Callable[[], Tensor],
              params: Sequence[Tuple[str, Tensor]],
              step: Optional[float] = None,
              tol: Optional[float] = None,
              max_coords: int = 8,
              seed: int = 0) -> GradcheckReport:
    """Compare backward() gradients with central differences.

    ``max_coords`` random coordinates are sampled per parameter tensor, so
    the check stays fast on full networks while every parameter group is
    covered.
    """
    params = list(params)
    if not params:
        raise ValueError("gradcheck needs at least one parameter")
    dtype = params[0][1].dtype
    f64 = dtype == np.float64
    if step is None:
        step = 1e-6 if f64 else 1e-3
    if tol is None:
        tol = 1e-4 if f64 else 1e-3

    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic: Dict[str, np.ndarray] = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }

    report = GradcheckReport(tol=tol, step=step)
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        rng = named_rng(seed, f"gradcheck:{name}")
        coords = rng.permutation(n)[:max_coords] if n > max_coords else np.arange(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = loss_fn().item()
            flat[c] = orig - step
            f_minus = loss_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[c]), numeric))
        report.groups.append(GroupResult(name=name, checked=len(coords),
                                         max_rel_err=worst))
    return report


# ---------------------------------------------------------------------------
# ready-made suites used by the CLI


def suite_tam(dtype=np.float64, seed: int = 0) -> GradcheckReport:
    """Gradcheck the aggregation weights and its input on a small clip."""
    from .tam import tam_apply, tam_init

    rng = named_rng(seed, "suite_tam")
    t, c, h, w = 5, 4, 3, 3
    x = Tensor(rng.standard_normal((t, c, h, w)).astype(dtype), requires_grad=True)
    params = tam_init(c, 3, scheme="identity+noise", seed=seed, dtype=dtype)
    probe = named_rng(seed, "suite_tam_probe").standard_normal(
        (t, c, h, w)).astype(dtype)

    def loss_fn():
        out = tam_apply(x, params, frames=t)
        return (out * Tensor(probe)).sum()

    return gradcheck(loss_fn, [("tam.weights", params.weights), ("input", x)],
                     seed=seed)


def suite_bl_module(dtype=np.float64, seed: int = 0) -> GradcheckReport:
    """Gradcheck one dual-branch stage of the tiny backbone."""
    from .arch import ArchSpec
    from .network import build_network

    spec = ArchSpec(variant="blvnet", backbone_depth="tiny", n_pairs=1,
                    num_classes=2, input_size=32)
    net = build_network(spec, seed=seed, dtype=dtype)
    stage = net.stages[1]
    rng = named_rng(seed, "suite_bl")
    xb = Tensor(rng.standard_normal((2, 16, 4, 4)).astype(dtype), requires_grad=True)
    xl = Tensor(rng.standard_normal((2, 16, 8, 8)).astype(dtype), requires_grad=True)
    probe = named_rng(seed, "suite_bl_probe").standard_normal((2, 64, 4, 4)).astype(dtype)

    def loss_fn():
        out = stage.forward(xb, xl, training=True)
        return (out * Tensor(probe)).sum()

    params = [(n, p) for n, p in _stage_params(stage)]
    params.append(("x_big", xb))
    params.append(("x_little", xl))
    return gradcheck(loss_fn, params, seed=seed, max_coords=4)


def _stage_params(stage):
    for child in stage.children():
        yield from child.named_params()


def suite_full_tiny(dtype=np.float64, seed: int = 0) -> GradcheckReport:
    """Gradcheck every parameter group of the tiny aggregation network.

    Parameters are perturbed off the identity initialization first: the
    identity aggregation weights sit exactly on the ReLU kink manifold
    (pre-activations are 0 wherever the previous ReLU emitted 0), where the
    loss is genuinely non-differentiable.  The pass runs with eval-mode
    normalization: at this scale the deepest maps are 1x1 with two entries
    per pair, where batch statistics make the loss too ill-conditioned for
    central differences (the batch-statistics backward is covered by the
    bl-module suite and the op-level tests, which use healthy batch sizes).
    """
    from .arch import ArchSpec
    from .network import build_network
    from .trainer import cross_entropy

    spec = ArchSpec(variant="blvnet-tam", backbone_depth="tiny", n_pairs=2,
                    num_classes=3, input_size=32)
    net = build_network(spec, seed=seed, dtype=dtype)
    for name, p in net.named_params():
        jitter = named_rng(seed, f"suite_full.jitter:{name}")
        p.data = p.data + 0.05 * jitter.standard_normal(p.shape).astype(dtype)
    rng = named_rng(seed, "suite_full")
    x = Tensor(rng.standard_normal((spec.total_frames, 3, 32, 32)).astype(dtype))
    labels = np.array([1])

    # settle the normalization buffers so eval-mode activations stay in a
    # numerically reasonable range (fresh buffers leave the logits saturated)
    for _ in range(25):
        net.forward(x, frames=spec.total_frames, training=True)

    def loss_fn():
        logits = net.forward(x, frames=spec.total_frames, training=False)
        return cross_entropy(logits, labels)

    # small step: at 1e-6 the differences occasionally straddle a ReLU kink
    # somewhere in the 30k activations; 1e-8 keeps crossings out of reach
    # while staying far above f64 round-off for these gradient magnitudes
    step = 1e-8 if dtype == np.float64 else None
    return gradcheck(loss_fn, net.named_params(), seed=seed, max_coords=2,
                     step=step)


SUITES = {
    "tam": suite_tam,
    "bl-module": suite_bl_module,
    "full-tiny": suite_full_tiny,
}
