"""Architecture descriptions and frame routing for the dual-branch family.

Variants:
  tsn         plain single-path ResNet backbone, one pipeline per frame
  tsn-blnet   dual-branch backbone, both branches fed from the same frame
  blvnet      dual-branch backbone, odd frames to the Big branch and even
              frames to the Little branch (local fusion), no aggregation
  blvnet-tam  blvnet plus temporal aggregation layers (global fusion)
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Tuple


class ArchError(ValueError):
    """Invalid architecture description."""


VARIANTS = ("tsn", "tsn-blnet", "blvnet", "blvnet-tam")

# Dual-branch stage tables: Big-branch bottleneck repeats for stages 2-4 (the
# merge block completes each stage) and the repeat count of the trailing
# single-path stage.  Depth 50 follows the published 50-layer configuration;
# the other entries scale the same wiring.  The 101 repeats are set to land
# on the published parameter/compute budget of the 101-layer model.
BL_TABLES: Dict[str, dict] = {
    "26": dict(big=(1, 1, 1), tail=2, base=64),
    "50": dict(big=(2, 3, 5), tail=3, base=64),
    "101": dict(big=(2, 9, 16), tail=3, base=64),
    "tiny": dict(big=(1, 1, 1), tail=1, base=16),
}

# Plain ResNet stage repeats for the tsn variant.
TSN_TABLES: Dict[str, dict] = {
    "26": dict(blocks=(2, 2, 2, 2), base=64),
    "50": dict(blocks=(3, 4, 6, 3), base=64),
    "101": dict(blocks=(3, 4, 23, 3), base=64),
    "tiny": dict(blocks=(1, 1, 1, 1), base=16),
}


@dataclass
class ArchSpec:
    """Declarative description of one network variant."""

    variant: str = "blvnet-tam"
    backbone_depth: str = "50"
    alpha: int = 2            # Big/Little width ratio
    beta: int = 4             # Little-branch depth divisor
    r: int = 3                # temporal aggregation range
    n_pairs: int = 8          # pipeline instances; total frames = 2 * n_pairs
    num_classes: int = 174
    input_size: int = 224
    odd_to_big: bool = True   # flip to route even frames to the Big branch

    def __post_init__(self):
        self.backbone_depth = str(self.backbone_depth)
        if self.variant not in VARIANTS:
            raise ArchError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.backbone_depth not in BL_TABLES:
            raise ArchError(
                f"unknown backbone depth {self.backbone_depth!r}; expected one of "
                f"{tuple(BL_TABLES)}")
        if self.alpha < 1 or self.beta < 1:
            raise ArchError("alpha and beta must be positive")
        if self.r < 1 or self.r % 2 == 0:
            raise ArchError(f"temporal range r must be odd, got {self.r}")
        if self.n_pairs < 1:
            raise ArchError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.num_classes < 2:
            raise ArchError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 8:
            raise ArchError(f"input_size must be >= 8, got {self.input_size}")

    @property
    def total_frames(self) -> int:
        return 2 * self.n_pairs

    @property
    def uses_pairs(self) -> bool:
        return self.variant in ("blvnet", "blvnet-tam")

    @property
    def uses_tam(self) -> bool:
        return self.variant == "blvnet-tam"

    @property
    def name(self) -> str:
        return f"{self.variant}-{self.backbone_depth}"

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(**d)


def parse_arch_name(name: str) -> Tuple[str, str]:
    """Split a CLI token like ``blvnet-tam-50`` or ``tsn-tiny`` into
    (variant, depth)."""
    token = name.strip().lower()
    for variant in sorted(VARIANTS, key=len, reverse=True):
        prefix = variant + "-"
        if token.startswith(prefix):
            depth = token[len(prefix):]
            if depth in BL_TABLES:
                return variant, depth
    raise ArchError(
        f"unknown architecture {name!r}; expected <variant>-<depth> with variant in "
        f"{VARIANTS} and depth in {tuple(BL_TABLES)}")


def parse_frames_flag(text: str) -> int:
    """Parse the NxM frames notation (M fixed to 2) or a bare even count.

    Returns n_pairs.
    """
    t = text.strip().lower()
    if "x" in t:
        left, _, right = t.partition("x")
        try:
            n, m = int(left), int(right)
        except ValueError as e:
            raise ArchError(f"bad frames value {text!r}; expected e.g. 8x2") from e
        if m != 2:
            raise ArchError(f"frames notation is Nx2 (pairs of frames), got {text!r}")
        if n < 1:
            raise ArchError(f"frame pairs must be >= 1, got {text!r}")
        return n
    try:
        total = int(t)
    except ValueError as e:
        raise ArchError(f"bad frames value {text!r}; expected NxM or an even count") from e
    if total < 2 or total % 2:
        raise ArchError(f"total frame count must be even and >= 2, got {total}")
    return total // 2


@dataclass
class RoutingPlan:
    """Frame routing for the paired variants.

    ``pairs[k]`` gives (big_frame, little_frame) as 0-based frame indices for
    pipeline instance k; ``duplicate_from[t]`` names the source position each
    output frame copies from (identity for computed positions).
    """

    pairs: List[Tuple[int, int]]
    duplicate_from: List[int]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def route_frames(num_frames: int, spec: ArchSpec) -> RoutingPlan:
    """Plan the odd/even split: pair k consumes frames (2k-1, 2k) 1-based,
    the Big branch sees the odd frame at half resolution, and outputs are
    duplicated so position 2k repeats position 2k-1."""
    if not spec.uses_pairs:
        raise ArchError(f"variant {spec.variant!r} does not route frames in pairs")
    if num_frames < 2 or num_frames % 2:
        raise ArchError(
            f"paired variants require an even total frame count, got {num_frames}")
    pairs = []
    dup = []
    for k in range(num_frames // 2):
        odd, even = 2 * k, 2 * k + 1  # 0-based; 1-based frames 2k+1 and 2k+2
        if spec.odd_to_big:
            pairs.append((odd, even))
        else:
            pairs.append((even, odd))
        dup.extend([odd, odd])  # output 2k and 2k+1 both come from the pair output
    return RoutingPlan(pairs=pairs, duplicate_from=dup)
