"""Command-line front door.

Exit codes: 0 success, 1 verification-suite failure, 2 usage error
(unknown flags, invalid architecture, missing files), 3 malformed data.
All commands accept --format {text,json} and --seed; JSON and text output
report the same numbers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analyzer
from .arch import ArchSpec, ArchError, parse_arch_name, parse_frames_flag
from .dataio import (DataError, MotionTaskConfig, load_clips,
                     synth_motion_dataset, uniform_sample)
from .gradcheck import SUITES
from .network import CheckpointError, build_network, forward_video, load_checkpoint
from .tensor import Tensor, TensorError
from .trainer import (DEFAULT_TOY_VARIANTS, TrainConfig, TrainingDiverged,
                      train_toy)

EXIT_OK = 0
EXIT_SUITE = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("BLVNET_THREADS", "1")))
    except ValueError:
        return 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; keep message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blvnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="per-layer table with parameter and MAC totals")
    p.add_argument("--arch", required=True, help="e.g. blvnet-tam-50, tsn-tiny")
    p.add_argument("--frames", default="8x2", help="NxM pairs notation, e.g. 8x2")
    p.add_argument("--classes", type=int, default=174)
    p.add_argument("--input-size", type=int, default=224)
    _common_flags(p)

    p = sub.add_parser("flops", help="cost report without the per-layer table")
    p.add_argument("--arch", required=True)
    p.add_argument("--frames", default="8x2")
    p.add_argument("--classes", type=int, default=174)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--multiply-add", action="store_true",
                   help="report 2x (mul+add) counts instead of MACs")
    _common_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("--module", choices=sorted(SUITES), default="tam")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    _common_flags(p)

    p = sub.add_parser("train-toy", help="synthetic-motion ablation at tiny scale")
    p.add_argument("--variants", default=",".join(DEFAULT_TOY_VARIANTS),
                   help="comma-separated: tsn,blvnet,blvnet-tam")
    p.add_argument("--clips", type=int, default=512)
    p.add_argument("--val-clips", type=int, default=256)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--out", default=None, help="directory for logs and checkpoints")
    _common_flags(p)

    p = sub.add_parser("infer", help="classify a clip from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="clip container manifest")
    p.add_argument("--clip", default=None, help="clip id (default: all clips)")
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--threads", type=int, default=None,
                   help="clip-level parallelism (default: BLVNET_THREADS or 1)")
    _common_flags(p)

    p = sub.add_parser("sample-plan", help="uniform segment sampling indices")
    p.add_argument("--frames", type=int, required=True, help="video length L")
    p.add_argument("--segments", type=int, required=True)
    p.add_argument("--mode", choices=("train", "infer"), default="infer")
    _common_flags(p)

    return parser


def _spec_from_args(args) -> ArchSpec:
    variant, depth = parse_arch_name(args.arch)
    n_pairs = parse_frames_flag(args.frames)
    return ArchSpec(variant=variant, backbone_depth=depth, n_pairs=n_pairs,
                    num_classes=args.classes, input_size=args.input_size)


def cmd_summarize(args) -> int:
    spec = _spec_from_args(args)
    net = build_network(spec, seed=args.seed)
    report = analyzer.analyze(net)
    if args.format == "json":
        print(analyzer.render_json(report))
    else:
        print(analyzer.render_text(report, per_layer=True))
    return EXIT_OK


def cmd_flops(args) -> int:
    spec = _spec_from_args(args)
    net = build_network(spec, seed=args.seed)
    report = analyzer.analyze(net)
    if args.format == "json":
        d = report.to_dict()
        d.pop("layers")
        if args.multiply_add:
            d["flops_multiply_add"] = report.flops(multiply_add=True)
        print(json.dumps(d, indent=2, sort_keys=True))
    else:
        print(analyzer.render_text(report, per_layer=False))
        if args.multiply_add:
            print(f"mul+add ops:          {report.flops(multiply_add=True)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.dtype == "f64" else np.float32
    report = SUITES[args.module](dtype=dtype, seed=args.seed)
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(f"gradcheck suite: {args.module} ({args.dtype}, step {report.step:g}, "
              f"tol {report.tol:g})")
        for g in report.groups:
            print(f"  {g.name:<40} coords {g.checked:>3}  max rel err {g.max_rel_err:.3e}")
        print(f"max rel err: {report.max_rel_err:.3e}  -> "
              f"{'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_SUITE


def cmd_train_toy(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in DEFAULT_TOY_VARIANTS:
            raise ArchError(f"unknown toy variant {v!r}; expected subset of "
                            f"{DEFAULT_TOY_VARIANTS}")
    task = MotionTaskConfig()
    train_clips = synth_motion_dataset(args.clips, frames=args.frames, config=task,
                                       seed=args.seed)
    val_clips = synth_motion_dataset(args.val_clips, frames=args.frames, config=task,
                                     seed=args.seed + 1)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed)
    results = train_toy(variants, train_clips, val_clips, cfg, out_dir=args.out,
                        input_size=task.size)
    if args.format == "json":
        print(json.dumps({v: r.to_dict() for v, r in results.items()},
                         indent=2, sort_keys=True))
    else:
        for v, r in results.items():
            print(f"{v + '-tiny':<18} final val acc {r.final_val_acc:.3f}"
                  + (f"  checkpoint {r.checkpoint}" if r.checkpoint else ""))
    return EXIT_OK


def cmd_infer(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    net, manifest = load_checkpoint(args.checkpoint)
    clips = load_clips(args.data)
    if args.clip is not None:
        clips = [c for c in clips if c.clip_id == args.clip]
        if not clips:
            raise FileNotFoundError(f"clip {args.clip!r} not in manifest {args.data}")

    from .dataio import clips_to_batch

    def classify(clip):
        x, _ = clips_to_batch([clip])
        probs = forward_video(net, Tensor(x.astype(net.dtype)))
        order = np.argsort(probs.data)[::-1][:args.topk]
        return clip.clip_id, [(int(i), float(probs.data[i])) for i in order]

    threads = args.threads if args.threads is not None else default_threads()
    if threads > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(classify, clips))
    else:
        results = [classify(c) for c in clips]

    if args.format == "json":
        print(json.dumps({cid: [{"class": c, "prob": p} for c, p in top]
                          for cid, top in results}, indent=2, sort_keys=True))
    else:
        for cid, top in results:
            ranks = "  ".join(f"class {c}: {p:.4f}" for c, p in top)
            print(f"{cid}: {ranks}")
    return EXIT_OK


def cmd_sample_plan(args) -> int:
    try:
        plan = uniform_sample(args.frames, args.segments, mode=args.mode,
                              seed=args.seed)
    except DataError as e:  # bad flag values are usage errors, not data errors
        raise ValueError(str(e)) from e
    if args.format == "json":
        print(json.dumps({"n": plan.n, "mode": plan.mode, "indices": plan.indices}))
    else:
        print(" ".join(str(i) for i in plan.indices))
    return EXIT_OK


COMMANDS = {
    "summarize": cmd_summarize,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "sample-plan": cmd_sample_plan,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as e:
        print(f"error: malformed checkpoint: {e}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        print(f"error: malformed data: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchError, TensorError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SUITE


if __name__ == "__main__":
    sys.exit(main())
