"""Command-line entry point: ``swinfe <command> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.
Every command writes its effective config next to its outputs.
"""
import argparse
import logging
import os
import sys
import time

import numpy as np

from .autodiff import ShapeError, Tape
from .backbone import ConfigError, attention_flops, backbone_forward, init_backbone
from .checkpoint import CheckpointError
from .config import RunConfig
from .data import GenerationError, synth_sample, write_pgm
from .metrics import format_table
from .train import TrainingError, evaluate, load_detector, train

log = logging.getLogger("swinfe")

NECKS = ("fpn", "pafpn", "fefpn")
# published full-scale SSDD results, printed for orientation only
REFERENCE_ROWS = (
    ("ResNet-50", "FPN", "90.30"),
    ("Swin-T", "FPN", "92.51"),
    ("Swin-T", "PAFPN", "88.60"),
    ("Swin-T", "FEFPN", "93.08"),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, out_default):
    p.add_argument("--config", help="key = value config file (defaults: toy experiment)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")


def build_parser():
    ap = _Parser(prog="swinfe", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a detector on synthetic scenes")
    _common(p, "runs/train")
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("eval", help="AP of a checkpoint on the eval split")
    _common(p, None)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train and evaluate every neck kind under one seed")
    _common(p, "runs/ablate")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    p.add_argument("scope", choices=("ops", "block", "model", "all"))
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("bench-attention", help="windowed vs global attention cost")
    _common(p, None)
    p.add_argument("--sizes", default="128,256", help="comma-separated square input sides")
    p.add_argument("--window", type=int, help="window size (default: backbone.window)")

    p = sub.add_parser("synth-preview", help="write synthetic scenes as PGM plus boxes")
    _common(p, "runs/preview")
    p.add_argument("-n", type=int, default=4, help="number of scenes")
    p.add_argument("--start", type=int, default=0, help="first scene index")
    return ap


def load_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.config is None:
        return RunConfig.from_text("", overrides)
    if not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    return RunConfig.from_file(args.config, overrides)


def _persist(cfg, out_dir, name="config.txt"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as f:
        f.write(cfg.dumps())


def cmd_train(args):
    cfg = load_config(args)
    t0 = time.perf_counter()
    res = train(cfg, out_dir=args.out, resume=args.resume)
    last = res.log_lines[-1].split("\t") if res.log_lines else None
    print(f"trained {cfg['run.steps']} steps in {time.perf_counter() - t0:.1f}s -> {args.out}")
    if last:
        print(f"final step {last[0]}: cls {float(last[1]):.4f} reg {float(last[2]):.4f} "
              f"total {float(last[3]):.4f}")
    return 0


def _eval_report(result, iou_thresh, backbone, neck):
    lines = [f"AP@{iou_thresh:g}: {100 * result.ap:.2f}%"]
    if len(result.precision):
        lines.append(f"precision {result.precision[-1]:.4f}  recall {result.recall[-1]:.4f}")
    else:
        lines.append("precision -  recall - (no detections)")
    lines.append(f"tp {result.tp}  fp {result.fp}  gt {result.n_gt}")
    return "\n".join(lines) + "\n" + format_table([(backbone, neck, result.ap)])


def cmd_eval(args):
    if args.config is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        if os.path.isfile(sibling):
            args.config = sibling
    cfg = load_config(args)
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    det = load_detector(cfg, args.checkpoint)
    res = evaluate(det, cfg)
    report = _eval_report(res, cfg["metrics.iou_thresh"], _backbone_label(cfg),
                          cfg["neck.kind"].upper())
    sys.stdout.write(report)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    _persist(cfg, out, "eval_config.txt")
    with open(os.path.join(out, "eval.txt"), "w", encoding="utf-8") as f:
        f.write(report)
    return 0


def _backbone_label(cfg):
    if cfg["backbone.embed_dim"] == 96 and cfg["backbone.depths"] == (2, 2, 6, 2):
        return "Swin-T"
    return f"Swin(C={cfg['backbone.embed_dim']})"


def ablation_table(rows, budget):
    title = f"Neck ablation, toy-scale synthetic speckle scenes ({budget}); not SSDD results"
    footer = ["Reference only (published SSDD mAP, full-scale training; cited, not expected):"]
    footer += [f"  {b} | {n} | {v}" for b, n, v in REFERENCE_ROWS]
    return format_table(rows, title=title, footer=footer)


def cmd_ablate(args):
    base = load_config(args)
    _persist(base, args.out)
    rows = []
    for kind in NECKS:
        cfg = RunConfig(dict(base))
        cfg.set("neck.kind", kind)
        log.info("ablation row %s", kind)
        res = train(cfg, out_dir=os.path.join(args.out, kind))
        ev = evaluate(res.detector, cfg)
        rows.append((_backbone_label(cfg), kind.upper(), ev.ap))
    budget = (f"seed {base['run.seed']}, {base['run.steps']} steps, "
              f"{base['data.n_train']}/{base['data.n_eval']} images")
    table = ablation_table(rows, budget)
    sys.stdout.write(table)
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    return 0


def cmd_gradcheck(args):
    from . import gradcheck

    scopes = ("ops", "block", "model") if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        for r in gradcheck.run(scope, corrupt=args.corrupt):
            print(r.line())
            ok &= r.ok
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 2


def measure_attention(cfg, size, global_attention, seed=0):
    """``(attention MACs, core MACs, seconds)`` for one forward pass on a ``size``-square image."""
    cfg = cfg.__class__(**{**cfg.__dict__, "global_attention": global_attention})
    cfg.check_input(size, size)
    rng = np.random.default_rng(seed)
    params = init_backbone(cfg, rng)
    image = rng.standard_normal((1, cfg.in_channels, size, size)).astype(np.float32)
    tape = Tape(np.float32)
    t0 = time.perf_counter()
    backbone_forward(tape, image, params, cfg)
    return attention_flops(tape.flops), tape.flops.get("attn_core"), time.perf_counter() - t0


def cmd_bench_attention(args):
    cfg = load_config(args)
    swin = cfg.swin()
    if args.window is not None:
        swin = swin.__class__(**{**swin.__dict__, "window_size": args.window})
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}") from None
    if not sizes:
        raise UsageError("--sizes is empty")
    rows = []
    for s in sizes:
        wf, wc, wt = measure_attention(swin, s, False)
        gf, gc, gt = measure_attention(swin, s, True)
        rows.append((s, wf, gf, wc, gc, wt, gt))
    print(f"attention MACs per forward pass (window {swin.window_size}, C={swin.embed_dim})")
    print(f"{'size':>6} {'windowed':>14} {'global':>16} {'win x':>7} {'glob x':>7} "
          f"{'core x':>7} {'win ms':>9} {'glob ms':>9}")
    prev = None
    for r in rows:
        s, wf, gf, wc, gc, wt, gt = r
        if prev is None:
            ratios = ("-", "-", "-")
        else:
            ratios = (f"{wf / prev[1]:.3f}", f"{gf / prev[2]:.3f}", f"{gc / prev[4]:.3f}")
        print(f"{s:>6} {wf:>14,d} {gf:>16,d} {ratios[0]:>7} {ratios[1]:>7} {ratios[2]:>7} "
              f"{1e3 * wt:>9.1f} {1e3 * gt:>9.1f}")
        prev = r
    if args.out:
        _persist(cfg, args.out)
    return 0


def cmd_synth_preview(args):
    cfg = load_config(args)
    if args.n < 0:
        raise UsageError("-n must be non-negative")
    _persist(cfg, args.out)
    synth = cfg.synth()
    failed = 0
    ann = []
    for i in range(args.start, args.start + args.n):
        s = synth_sample(synth, i)
        path = os.path.join(args.out, f"sample_{i:05d}.pgm")
        try:
            write_pgm(path, s.image[0])
        except OSError as e:
            print(f"error writing {path}: {e}", file=sys.stderr)
            failed += 1
            continue
        ann += [f"{i} {x1:g} {y1:g} {x2:g} {y2:g}\n" for x1, y1, x2, y2 in s.gt]
    path = os.path.join(args.out, "annotations.txt")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("".join(ann))
    except OSError as e:
        print(f"error writing {path}: {e}", file=sys.stderr)
        failed += 1
    print(f"wrote {args.n - failed} scenes to {args.out}")
    return 2 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "bench-attention": cmd_bench_attention,
    "synth-preview": cmd_synth_preview,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"swinfe: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ShapeError) as e:
        print(f"swinfe: error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, TrainingError, GenerationError, FloatingPointError, OSError) as e:
        print(f"swinfe: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
