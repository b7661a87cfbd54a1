"""Static cost model: parameters, multiply-accumulates, activation memory.

Everything is derived from layer metadata by mirroring the forward schedule;
no tensors are allocated.  Conventions:

* reported "FLOPs" count multiply-accumulate operations (MACs), matching the
  usual tables for this model family; a doubled mul+add figure is available
  via ``CostReport.flops(multiply_add=True)``
* elementwise work (ReLU, batch-norm application, sums, bilinear resampling)
  is excluded from MACs and tracked in a separate column
* duplicated pair outputs are copies, never recomputed, and cost zero MACs
* inference memory is the peak number of live activation elements over the
  schedule; training memory additionally retains every layer output for the
  backward pass
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .arch import ArchSpec
from .network import BLModule, Bottleneck, Classifier, ConvBN, Network, TamLayer


@dataclass
class LayerRow:
    """Per-layer totals for one full video input."""

    name: str
    kind: str
    in_shape: Tuple[int, int, int]    # (C, H, W) per entry
    out_shape: Tuple[int, int, int]
    entries: int                      # tensors of this shape processed per video
    params: int
    macs: int
    elementwise: int
    live_extra: int = 0               # elems held by sibling branches while this runs

    @property
    def in_elems(self) -> int:
        c, h, w = self.in_shape
        return c * h * w * self.entries

    @property
    def out_elems(self) -> int:
        c, h, w = self.out_shape
        return c * h * w * self.entries


@dataclass
class CostReport:
    arch: str
    n_pairs: int
    input_size: int
    params: int
    macs: int
    elementwise: int
    peak_activation_elems: int
    train_activation_elems: int
    classifier_macs: int              # FC cost counted once per pipeline instance
    classifier_macs_single: int       # FC cost if counted once per video
    rows: List[LayerRow] = field(default_factory=list)

    @property
    def macs_per_pair(self) -> float:
        return self.macs / self.n_pairs

    def flops(self, multiply_add: bool = False) -> int:
        return self.macs * 2 if multiply_add else self.macs

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "n_pairs": self.n_pairs,
            "input_size": self.input_size,
            "params": self.params,
            "macs": self.macs,
            "macs_per_pair": self.macs_per_pair,
            "elementwise": self.elementwise,
            "peak_activation_elems": self.peak_activation_elems,
            "train_activation_elems": self.train_activation_elems,
            "classifier_macs": self.classifier_macs,
            "classifier_macs_single": self.classifier_macs_single,
            "layers": [
                {
                    "name": r.name, "kind": r.kind,
                    "in_shape": list(r.in_shape), "out_shape": list(r.out_shape),
                    "entries": r.entries, "params": r.params, "macs": r.macs,
                    "elementwise": r.elementwise,
                }
                for r in self.rows
            ],
        }


class _Walk:
    """Accumulates rows plus the live-set peak while mirroring the forward
    schedule."""

    def __init__(self):
        self.rows: List[LayerRow] = []
        self.peak = 0

    def emit(self, row: LayerRow) -> None:
        self.rows.append(row)
        self.peak = max(self.peak, row.in_elems + row.out_elems + row.live_extra)


def _elems(shape: Tuple[int, int, int]) -> int:
    c, h, w = shape
    return c * h * w


def _convbn_row(m: ConvBN, in_shape, entries, live_extra=0) -> Tuple[LayerRow, tuple]:
    c, h, w = in_shape
    ho, wo = m.out_hw(h, w)
    out_shape = (m.cout, ho, wo)
    macs = entries * _elems(out_shape) * m.k * m.k * m.cin
    ew = entries * _elems(out_shape) * (3 if m.act else 2)  # bn scale+shift, relu
    params = m.cout * m.cin * m.k * m.k + 2 * m.cout
    return LayerRow(m.name, "conv", in_shape, out_shape, entries, params, macs,
                    ew, live_extra), out_shape


def _tam_row(m: TamLayer, in_shape, entries, live_extra=0) -> LayerRow:
    macs = entries * _elems(in_shape) * m.r
    ew = entries * _elems(in_shape)  # relu
    return LayerRow(m.name, "tam", in_shape, in_shape, entries,
                    m.r * m.channels, macs, ew, live_extra)


def _bottleneck(walk: _Walk, b: Bottleneck, in_shape, entries, live_extra=0) -> tuple:
    x_hold = entries * _elems(in_shape)  # shortcut input stays live
    shape = in_shape
    if b.tam is not None:
        walk.emit(_tam_row(b.tam, shape, entries, live_extra + x_hold))
    row, shape = _convbn_row(b.c1, shape, entries, live_extra + x_hold)
    walk.emit(row)
    row, shape = _convbn_row(b.c2, shape, entries, live_extra + x_hold)
    walk.emit(row)
    row, shape = _convbn_row(b.c3, shape, entries, live_extra + x_hold)
    walk.emit(row)
    if b.proj is not None:
        prow, pshape = _convbn_row(b.proj, in_shape, entries,
                                   live_extra + entries * _elems(shape))
        walk.emit(prow)
        assert pshape == shape
    walk.emit(LayerRow(f"{b.name}.sum", "add", shape, shape, entries, 0, 0,
                       2 * entries * _elems(shape), live_extra))
    return shape


def _resize_row(name, in_shape, factor, entries, live_extra=0) -> Tuple[LayerRow, tuple]:
    c, h, w = in_shape
    out_shape = (c, int(h * factor), int(w * factor))
    ew = 4 * entries * _elems(out_shape)
    return LayerRow(name, "resize", in_shape, out_shape, entries, 0, 0, ew,
                    live_extra), out_shape


def _copy_row(name, shape, entries_out) -> LayerRow:
    return LayerRow(name, "copy", shape, shape, entries_out, 0, 0, 0)


def _bl_module(walk: _Walk, st: BLModule, in_shape, entries) -> tuple:
    # Little input is held while the Big path runs
    little_hold = entries * _elems(in_shape)
    row, bshape = _resize_row(f"{st.name}.down", in_shape, 0.5, entries, little_hold)
    walk.emit(row)
    for block in st.big:
        if isinstance(block, ConvBN):
            row, bshape = _convbn_row(block, bshape, entries, little_hold)
            walk.emit(row)
        else:
            bshape = _bottleneck(walk, block, bshape, entries, little_hold)
    row, bshape = _resize_row(f"{st.name}.up", bshape, 2, entries, little_hold)
    walk.emit(row)
    big_hold = entries * _elems(bshape)
    lshape = in_shape
    for block in st.little:
        if isinstance(block, ConvBN):
            row, lshape = _convbn_row(block, lshape, entries, big_hold)
            walk.emit(row)
        else:
            lshape = _bottleneck(walk, block, lshape, entries, big_hold)
    if bshape != lshape:
        raise ValueError(f"{st.name}: branch shape mismatch {bshape} vs {lshape}")
    walk.emit(LayerRow(f"{st.name}.sum", "add", bshape, bshape, entries, 0, 0,
                       2 * entries * _elems(bshape)))
    shape = bshape
    if st.merge is not None:
        shape = _bottleneck(walk, st.merge, shape, entries)
    elif st.relu_after_sum:
        walk.emit(LayerRow(f"{st.name}.relu", "relu", shape, shape, entries,
                           0, 0, entries * _elems(shape)))
    return shape


def analyze(net: Network, input_size: Optional[int] = None,
            n_pairs: Optional[int] = None) -> CostReport:
    """Walk the layer graph and assemble the full cost report."""
    spec = net.spec
    size = input_size or spec.input_size
    pairs = n_pairs or spec.n_pairs
    frames = 2 * pairs
    walk = _Walk()

    shape = (3, size, size)
    row, shape = _convbn_row(net.stem, shape, frames)
    walk.emit(row)
    if net.stem_pool:
        c, h, w = shape
        pooled = (c, (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1)
        walk.emit(LayerRow("stem.pool", "maxpool", shape, pooled, frames, 0, 0,
                           9 * frames * _elems(pooled)))
        shape = pooled
    if net.tams and net.tams[0] is not None:
        walk.emit(_tam_row(net.tams[0], shape, frames))

    if spec.variant == "tsn":
        for st in net.stages:
            for block in st:
                shape = _bottleneck(walk, block, shape, frames)
        instances = frames
    else:
        for idx, st in enumerate(net.stages):
            shape = _bl_module(walk, st, shape, pairs)
            is_last = idx + 1 == len(net.stages)
            if spec.uses_tam and not is_last:
                walk.emit(_copy_row(f"{st.name}.dup", shape, frames))
            tam = net.tams[idx + 1] if idx + 1 < len(net.tams) else None
            if tam is not None:
                walk.emit(_tam_row(tam, shape, frames))
        instances = pairs if spec.uses_pairs else frames

    for block in net.tail:
        shape = _bottleneck(walk, block, shape, instances)

    c, h, w = shape
    walk.emit(LayerRow("head.pool", "avgpool", shape, (c, 1, 1), instances,
                       0, 0, instances * _elems(shape)))
    fc_params = net.head.classes * net.head.cin + net.head.classes
    fc_macs_each = net.head.classes * net.head.cin
    walk.emit(LayerRow("head.fc", "linear", (c, 1, 1), (net.head.classes, 1, 1),
                       instances, fc_params, instances * fc_macs_each,
                       instances * net.head.classes))
    walk.emit(LayerRow("consensus", "mean", (net.head.classes, 1, 1),
                       (net.head.classes, 1, 1), 1, 0, 0,
                       instances * net.head.classes))

    rows = walk.rows
    total_macs = sum(r.macs for r in rows)
    total_ew = sum(r.elementwise for r in rows)
    total_params = sum(r.params for r in rows)
    input_elems = frames * 3 * size * size
    train_mem = input_elems + sum(r.out_elems for r in rows)
    peak = max(walk.peak, input_elems + rows[0].out_elems)

    report = CostReport(
        arch=spec.name,
        n_pairs=pairs,
        input_size=size,
        params=total_params,
        macs=total_macs,
        elementwise=total_ew,
        peak_activation_elems=peak,
        train_activation_elems=train_mem,
        classifier_macs=instances * fc_macs_each,
        classifier_macs_single=fc_macs_each,
        rows=rows,
    )
    actual = net.param_count()
    if report.params != actual:
        raise AssertionError(
            f"static parameter count {report.params} != executable store {actual}")
    return report


def count_params(net: Network) -> int:
    """Exact trainable parameter element count of the executable network."""
    return net.param_count()


def count_macs(net: Network, input_size: Optional[int] = None,
               n_pairs: Optional[int] = None) -> CostReport:
    return analyze(net, input_size=input_size, n_pairs=n_pairs)


def activation_memory(net: Network, input_size: Optional[int] = None,
                      n_pairs: Optional[int] = None, mode: str = "inference") -> int:
    """Activation footprint in elements for one video input."""
    if mode not in ("inference", "training"):
        raise ValueError(f"mode must be 'inference' or 'training', got {mode!r}")
    report = analyze(net, input_size=input_size, n_pairs=n_pairs)
    return report.peak_activation_elems if mode == "inference" else \
        report.train_activation_elems


# ---------------------------------------------------------------------------
# renderers


def render_text(report: CostReport, per_layer: bool = True) -> str:
    lines = []
    if per_layer:
        header = f"{'layer':<24} {'kind':<8} {'out shape':<16} {'entries':>7} " \
                 f"{'params':>12} {'MACs':>16}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in report.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<24} {r.kind:<8} {shape:<16} {r.entries:>7} "
                         f"{r.params:>12} {r.macs:>16}")
        lines.append("-" * len(header))
    lines.append(f"arch:                 {report.arch}")
    lines.append(f"frames:               {report.n_pairs}x2 @ {report.input_size}")
    lines.append(f"params:               {report.params} ({report.params / 1e6:.2f} M)")
    lines.append(f"MACs:                 {report.macs} ({report.macs / 1e9:.2f} G)")
    lines.append(f"MACs per frame pair:  {report.macs_per_pair:.0f}")
    lines.append(f"elementwise ops:      {report.elementwise}")
    lines.append(f"peak activations:     {report.peak_activation_elems} elems")
    lines.append(f"training activations: {report.train_activation_elems} elems")
    return "\n".join(lines)


def render_csv(report: CostReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["name", "kind", "in_shape", "out_shape", "entries",
                     "params", "macs", "elementwise"])
    for r in report.rows:
        writer.writerow([r.name, r.kind,
                         "x".join(str(d) for d in r.in_shape),
                         "x".join(str(d) for d in r.out_shape),
                         r.entries, r.params, r.macs, r.elementwise])
    return buf.getvalue()


def render_json(report: CostReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
