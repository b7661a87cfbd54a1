"""Executable layer graph for the dual-branch video backbones.

All parameters are shared across time: the same weights process every frame.
Paired variants route odd frames (1-based) into the Big branch at half
resolution and even frames into the Little branch, merge per stage, and
duplicate each pair output so the time axis keeps its full length.  The
trailing single-path stage consumes one entry per pair (duplicates carry no
information), and per-instance logits are averaged into the video-level
prediction.
"""

from __future__ import annotations

import json
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .arch import ArchSpec, ArchError, BL_TABLES, TSN_TABLES, route_frames
from .tam import tam_apply, tam_init
from .tensor import (Tensor, TensorError, add, gather_rows, linear, mean,
                     relu, reshape, seeded_normal, softmax)


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


# ---------------------------------------------------------------------------
# modules


class ConvBN:
    """Convolution + batch norm (+ optional ReLU), bias-free."""

    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int = 1,
                 pad: Optional[int] = None, act: bool = True,
                 seed: int = 0, dtype=np.float32):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.act = act
        std = float(np.sqrt(2.0 / (cin * k * k)))
        self.w = Tensor(seeded_normal(seed, f"{name}.w", (cout, cin, k, k), std, dtype),
                        requires_grad=True)
        self.gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(cout, dtype=dtype)
        self.running_var = np.ones(cout, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = ops.conv2d(x, self.w, stride=self.stride, padding=self.pad)
        h = ops.batchnorm2d(h, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=training)
        return relu(h) if self.act else h

    def named_params(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.bn.gamma", self.gamma
        yield f"{self.name}.bn.beta", self.beta

    def named_buffers(self):
        yield f"{self.name}.bn.mean", self.running_mean
        yield f"{self.name}.bn.var", self.running_var

    def out_hw(self, h: int, w: int) -> Tuple[int, int]:
        return (ops.conv_out_size(h, self.k, self.stride, self.pad),
                ops.conv_out_size(w, self.k, self.stride, self.pad))


class TamLayer:
    """Temporal aggregation over the current time axis."""

    def __init__(self, name: str, channels: int, r: int, scheme: str = "identity",
                 seed: int = 0, dtype=np.float32):
        self.name = name
        self.channels = channels
        self.r = r
        self.params = tam_init(channels, r, scheme=scheme, seed=seed,
                               dtype=dtype, name=name)

    def forward(self, x: Tensor, frames: int) -> Tensor:
        return tam_apply(x, self.params, frames=frames)

    def named_params(self):
        yield f"{self.name}.weights", self.params.weights

    def named_buffers(self):
        return iter(())


class Bottleneck:
    """Standard bottleneck residual block, optionally with an embedded
    aggregation module on the non-shortcut path."""

    def __init__(self, name: str, cin: int, cout: int, internal: int,
                 stride: int = 1, tam_r: Optional[int] = None,
                 seed: int = 0, dtype=np.float32):
        self.name = name
        self.cin, self.cout, self.internal = cin, cout, internal
        self.stride = stride
        self.c1 = ConvBN(f"{name}.c1", cin, internal, 1, seed=seed, dtype=dtype)
        self.c2 = ConvBN(f"{name}.c2", internal, internal, 3, stride=stride,
                         seed=seed, dtype=dtype)
        self.c3 = ConvBN(f"{name}.c3", internal, cout, 1, act=False,
                         seed=seed, dtype=dtype)
        self.proj: Optional[ConvBN] = None
        if stride != 1 or cin != cout:
            self.proj = ConvBN(f"{name}.proj", cin, cout, 1, stride=stride,
                               act=False, seed=seed, dtype=dtype)
        self.tam: Optional[TamLayer] = None
        if tam_r is not None:
            self.tam = TamLayer(f"{name}.tam", cin, tam_r, seed=seed, dtype=dtype)

    def forward(self, x: Tensor, training: bool, frames: int = 1) -> Tensor:
        h = x
        if self.tam is not None:
            h = self.tam.forward(h, frames)
        h = self.c1.forward(h, training)
        h = self.c2.forward(h, training)
        h = self.c3.forward(h, training)
        s = self.proj.forward(x, training) if self.proj is not None else x
        return relu(add(h, s))

    def children(self):
        out: List = []
        if self.tam is not None:
            out.append(self.tam)
        out.extend([self.c1, self.c2, self.c3])
        if self.proj is not None:
            out.append(self.proj)
        return out

    def named_params(self):
        for child in self.children():
            yield from child.named_params()

    def named_buffers(self):
        for child in self.children():
            yield from child.named_buffers()

    def out_hw(self, h: int, w: int) -> Tuple[int, int]:
        return self.c2.out_hw(h, w)


class BLModule:
    """One dual-branch stage: Big path at half resolution, Little path at
    full resolution, bilinear restore, elementwise sum, optional shared merge
    block."""

    def __init__(self, name: str, big: Sequence, little: Sequence,
                 merge: Optional[Bottleneck], relu_after_sum: bool):
        self.name = name
        self.big = list(big)
        self.little = list(little)
        self.merge = merge
        self.relu_after_sum = relu_after_sum

    def forward(self, x_big: Tensor, x_little: Tensor, training: bool) -> Tensor:
        if (x_big.shape[2] * 2, x_big.shape[3] * 2) != (x_little.shape[2], x_little.shape[3]):
            raise TensorError(
                f"{self.name}: Big input {x_big.shape} must be half the spatial size "
                f"of Little input {x_little.shape}")
        h = x_big
        for block in self.big:
            h = block.forward(h, training)
        h = ops.bilinear_resize(h, 2)
        l = x_little
        for block in self.little:
            l = block.forward(l, training)
        if h.shape != l.shape:
            raise TensorError(
                f"{self.name}: branch outputs do not align at the merge: "
                f"Big {h.shape} vs Little {l.shape}")
        m = add(h, l)
        if self.merge is not None:
            return self.merge.forward(m, training)
        return relu(m) if self.relu_after_sum else m

    def children(self):
        out = list(self.big) + list(self.little)
        if self.merge is not None:
            out.append(self.merge)
        return out

    def named_params(self):
        for child in self.children():
            yield from child.named_params()

    def named_buffers(self):
        for child in self.children():
            yield from child.named_buffers()


class Classifier:
    """Global average pooling plus the fully connected head."""

    def __init__(self, name: str, cin: int, classes: int, seed: int = 0,
                 dtype=np.float32):
        self.name = name
        self.cin, self.classes = cin, classes
        std = float(np.sqrt(1.0 / cin))
        self.w = Tensor(seeded_normal(seed, f"{name}.w", (classes, cin), std, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        pooled = ops.global_avgpool(x)
        return linear(pooled, self.w, self.b)

    def named_params(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b

    def named_buffers(self):
        return iter(())


# ---------------------------------------------------------------------------
# the network


class Network:
    """Built network: ordered modules plus the routing/consensus logic."""

    def __init__(self, spec: ArchSpec, seed: int, dtype):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.stem: ConvBN
        self.stem_pool = False          # tsn variant only
        self.tams: List[Optional[TamLayer]] = []   # after stem, stage1..3
        self.stages: List = []          # BLModule list or plain block lists (tsn)
        self.tail: List[Bottleneck] = []
        self.head: Classifier

    # -- parameter access ----------------------------------------------------

    def modules(self):
        yield self.stem
        for t in self.tams:
            if t is not None:
                yield t
        for st in self.stages:
            if isinstance(st, BLModule):
                yield st
            else:
                for block in st:
                    yield block
        for block in self.tail:
            yield block
        yield self.head

    def named_params(self) -> List[Tuple[str, Tensor]]:
        out = []
        for m in self.modules():
            out.extend(m.named_params())
        return out

    def named_buffers(self):
        out = []
        for m in self.modules():
            out.extend(m.named_buffers())
        return out

    def param_count(self) -> int:
        return sum(int(t.size) for _, t in self.named_params())

    # -- forward ---------------------------------------------------------------

    def _pair_indices(self, batch: int, frames: int):
        t = np.arange(batch * frames)
        clip, pos = t // frames, t % frames
        odd = t[pos % 2 == 0]    # 1-based odd frames
        even = t[pos % 2 == 1]
        if not self.spec.odd_to_big:
            odd, even = even, odd
        dup = (clip * (frames // 2) + pos // 2)
        return odd, even, dup

    def forward(self, x: Tensor, frames: int, training: bool = False,
                taps: Optional[list] = None) -> Tensor:
        """Run ``B*frames`` stacked frame images through the network.

        Returns per-clip logits of shape (B, num_classes).  ``taps``, when a
        list is passed, collects (name, Tensor) stage outputs on the
        full-length time axis for invariant checks.
        """
        if x.ndim != 4:
            raise TensorError(f"forward expects (B*T, 3, H, W), got {x.shape}")
        if frames < 1 or x.shape[0] % frames:
            raise TensorError(
                f"batch of {x.shape[0]} entries is not a multiple of {frames} frames")
        spec = self.spec
        batch = x.shape[0] // frames
        if spec.uses_pairs:
            # validates the even-frame-count requirement
            route_frames(frames, spec)

        h = self.stem.forward(x, training)
        if self.stem_pool:
            h = ops.maxpool2d(h, 3, 2, 1)
        if self.tams and self.tams[0] is not None:
            h = self.tams[0].forward(h, frames)

        if spec.variant == "tsn":
            for st in self.stages:
                for block in st:
                    h = block.forward(h, training)
            instances = frames
        else:
            odd, even, dup = self._pair_indices(batch, frames)
            m = None
            for idx, stage in enumerate(self.stages):
                if spec.uses_pairs:
                    if m is None or spec.uses_tam:
                        xo = gather_rows(h, odd)
                        xe = gather_rows(h, even)
                    else:
                        xo = xe = m  # duplicated entries are identical, skip the copies
                else:
                    xo = xe = h
                xb = ops.bilinear_resize(xo, 0.5)
                m = stage.forward(xb, xe, training)
                if spec.uses_pairs:
                    is_last = idx + 1 == len(self.stages)
                    if taps is not None or (spec.uses_tam and not is_last):
                        # materialize the Eq.-style duplicated time axis
                        h = gather_rows(m, dup)
                        if taps is not None:
                            taps.append((f"stage{idx + 1}", h))
                else:
                    h = m
                tam = self.tams[idx + 1] if idx + 1 < len(self.tams) else None
                if tam is not None:
                    h = tam.forward(h, frames)
            if spec.uses_pairs:
                h = m                      # one entry per pair for the tail
                instances = frames // 2
            else:
                instances = frames

        for block in self.tail:
            h = block.forward(h, training, frames=instances)
        logits = self.head.forward(h)
        per_clip = reshape(logits, (batch, instances, spec.num_classes))
        return mean(per_clip, axis=1)


def forward_video(net: Network, frames) -> Tensor:
    """Classify one clip: FrameBatch (T, C, H, W) in, class distribution out."""
    from .tam import FrameBatch

    t = frames.tensor if isinstance(frames, FrameBatch) else frames
    if t.ndim != 4:
        raise TensorError(f"forward_video expects (T, C, H, W), got {t.shape}")
    if t.shape[0] != net.spec.total_frames:
        raise TensorError(
            f"clip has {t.shape[0]} frames but the network expects "
            f"{net.spec.total_frames}")
    if t.shape[2] != net.spec.input_size or t.shape[3] != net.spec.input_size:
        raise TensorError(
            f"clip resolution {t.shape[2]}x{t.shape[3]} does not match the "
            f"network input size {net.spec.input_size}")
    logits = net.forward(t, frames=t.shape[0], training=False)
    probs = softmax(logits, axis=-1)
    return reshape(probs, (net.spec.num_classes,))


def bl_module_forward(module: BLModule, x_big: Tensor, x_little: Tensor,
                      training: bool = False) -> Tensor:
    """Run one dual-branch stage on explicit branch inputs."""
    return module.forward(x_big, x_little, training)


# ---------------------------------------------------------------------------
# builder


def build_network(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Materialize the layer graph for an architecture description."""
    net = Network(spec, seed, dtype)
    base = (TSN_TABLES if spec.variant == "tsn" else BL_TABLES)[spec.backbone_depth]["base"]
    r = spec.r

    if spec.variant == "tsn":
        table = TSN_TABLES[spec.backbone_depth]["blocks"]
        net.stem = ConvBN("stem", 3, base, 7, stride=2, pad=3, seed=seed, dtype=dtype)
        net.stem_pool = True
        net.tams = [None]
        cin = base
        for s, (blocks, stride) in enumerate(zip(table, (1, 2, 2, 2)), start=1):
            width = base * 4 * (2 ** (s - 1))
            stage = []
            for b in range(blocks):
                stage.append(Bottleneck(
                    f"stage{s}.b{b}", cin, width, width // 4,
                    stride=stride if b == 0 else 1, seed=seed, dtype=dtype))
                cin = width
            net.stages.append(stage)
        net.tail = []
        net.head = Classifier("head", cin, spec.num_classes, seed=seed, dtype=dtype)
        return net

    if spec.input_size % 32:
        raise ArchError(
            f"dual-branch variants need input_size divisible by 32, got {spec.input_size}")

    table = BL_TABLES[spec.backbone_depth]
    big_counts: Tuple[int, ...] = table["big"]
    tail_count: int = table["tail"]
    use_tam = spec.uses_tam

    net.stem = ConvBN("stem", 3, base, 7, stride=2, pad=3, seed=seed, dtype=dtype)
    net.tams = [TamLayer("tam0", base, r, seed=seed, dtype=dtype) if use_tam else None]

    # stage 1: single-conv Big path, three-conv Little stack, merge by sum
    half = base // 2
    stage1 = BLModule(
        "stage1",
        big=[ConvBN("stage1.big0", base, base, 3, stride=2, act=False,
                    seed=seed, dtype=dtype)],
        little=[ConvBN("stage1.little0", base, half, 3, seed=seed, dtype=dtype),
                ConvBN("stage1.little1", half, half, 3, stride=2, seed=seed, dtype=dtype),
                ConvBN("stage1.little2", half, base, 1, act=False, seed=seed, dtype=dtype)],
        merge=None, relu_after_sum=True)
    net.stages.append(stage1)
    net.tams.append(TamLayer("tam1", base, r, seed=seed, dtype=dtype) if use_tam else None)

    cin = base
    merge_strides = (2, 2, 1)
    for s, (count, mstride) in enumerate(zip(big_counts, merge_strides), start=2):
        width = base * 4 * (2 ** (s - 2))
        wl = width // spec.alpha
        little_count = max(1, count // spec.beta)
        big = []
        bin_ = cin
        for b in range(count):
            big.append(Bottleneck(f"stage{s}.big{b}", bin_, width, width // 4,
                                  seed=seed, dtype=dtype))
            bin_ = width
        little = []
        lin = cin
        for b in range(little_count):
            little.append(Bottleneck(f"stage{s}.little{b}", lin, wl, wl // 4,
                                     seed=seed, dtype=dtype))
            lin = wl
        little.append(ConvBN(f"stage{s}.align", wl, width, 1, act=False,
                             seed=seed, dtype=dtype))
        merge = Bottleneck(f"stage{s}.merge", width, width, width // 4,
                           stride=mstride, seed=seed, dtype=dtype)
        net.stages.append(BLModule(f"stage{s}", big, little, merge,
                                   relu_after_sum=False))
        if s < 4:
            net.tams.append(TamLayer(f"tam{s}", width, r, seed=seed, dtype=dtype)
                            if use_tam else None)
        cin = width

    tail_width = base * 32
    for b in range(tail_count):
        net.tail.append(Bottleneck(
            f"tail.b{b}", cin, tail_width, tail_width // 4,
            stride=2 if b == 0 else 1,
            tam_r=r if use_tam else None, seed=seed, dtype=dtype))
        cin = tail_width
    net.head = Classifier("head", cin, spec.num_classes, seed=seed, dtype=dtype)
    return net


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line, then concatenated binary tensor records


def _write_record(f, arr: np.ndarray) -> None:
    from .tensor import _TOKEN_OF

    token = _TOKEN_OF[arr.dtype]
    dims = " ".join(str(d) for d in arr.shape)
    head = f"v1 {token} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
    f.write(head.encode("ascii"))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_record(f) -> np.ndarray:
    from .tensor import decode_array, DTYPE_TOKENS

    header = f.readline()
    if not header:
        raise CheckpointError("unexpected end of checkpoint while reading a tensor record")
    header = header.decode("ascii", errors="replace").strip()
    parts = header.split()
    if len(parts) < 3 or parts[0] != "v1" or parts[1] not in DTYPE_TOKENS:
        raise CheckpointError(f"bad tensor record header: {header!r}")
    try:
        dims = [int(d) for d in parts[3:]]
    except ValueError as e:
        raise CheckpointError(f"bad tensor record header: {header!r}") from e
    count = 1
    for d in dims:
        count *= d
    itemsize = np.dtype(DTYPE_TOKENS[parts[1]]).itemsize
    payload = f.read(count * itemsize)
    if len(payload) != count * itemsize:
        raise CheckpointError("tensor record payload truncated")
    try:
        return decode_array(header, payload)
    except TensorError as e:
        raise CheckpointError(str(e)) from e


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> None:
    params = net.named_params()
    buffers = net.named_buffers()
    manifest = {
        "format": "blvnet-checkpoint-v1",
        "arch": net.spec.to_dict(),
        "seed": net.seed,
        "dtype": "f64" if net.dtype == np.float64 else "f32",
        "params": [[name, list(t.shape)] for name, t in params],
        "buffers": [[name, list(b.shape)] for name, b in buffers],
    }
    if extra:
        manifest["extra"] = extra
    with open(path, "wb") as f:
        f.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for _, t in params:
            _write_record(f, t.data)
        for _, b in buffers:
            _write_record(f, b)


def load_checkpoint(path) -> Tuple[Network, dict]:
    """Rebuild a network from a checkpoint.  Returns (network, manifest)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            manifest = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint manifest is not valid JSON: {e}") from e
        if manifest.get("format") != "blvnet-checkpoint-v1":
            raise CheckpointError(
                f"not a checkpoint file (format={manifest.get('format')!r})")
        try:
            spec = ArchSpec.from_dict(manifest["arch"])
        except (KeyError, TypeError, ArchError) as e:
            raise CheckpointError(f"checkpoint carries an invalid arch spec: {e}") from e
        dtype = np.float64 if manifest.get("dtype") == "f64" else np.float32
        net = build_network(spec, seed=int(manifest.get("seed", 0)), dtype=dtype)
        params = dict(net.named_params())
        listed = manifest.get("params", [])
        if [n for n, _ in listed] != list(params.keys()):
            raise CheckpointError("checkpoint parameter list does not match the architecture")
        for name, shape in listed:
            arr = _read_record(f)
            if list(arr.shape) != list(shape) or tuple(arr.shape) != params[name].shape:
                raise CheckpointError(
                    f"parameter {name} has shape {arr.shape}, expected {params[name].shape}")
            params[name].data = arr.astype(dtype)
        buffers = dict(net.named_buffers())
        for name, shape in manifest.get("buffers", []):
            arr = _read_record(f)
            if name not in buffers or tuple(arr.shape) != buffers[name].shape:
                raise CheckpointError(f"unexpected buffer record {name}")
            buffers[name][...] = arr.astype(buffers[name].dtype)
        if f.read(1):
            raise CheckpointError("trailing bytes after the last tensor record")
    return net, manifest
