"""Command-line entry points: generate, train, eval, report.

``train`` accepts multiple values for --sigma / --mu and expands them
into a sweep of runs (sequential by default, fanned out over worker
processes with --workers). Every flag has a config-file equivalent;
flags override the file. The effective config is echoed into each
output directory. Exit code 0 means all outputs were written; any
failure prints one machine-parseable ``error: <kind>: <message>`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys

from .config import ConfigError, ExperimentConfig
from .data import DataError, DatasetManifest, SynthParams, generate, split


OUT_ROOT_ENV = "SEMIDET_OUT_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _fail(kind: str, message: str) -> int:
    print(f"error: {kind}: {message}", file=sys.stderr)
    return 1


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out_dir = _resolve_out(args.out)
    params = SynthParams(
        image_size=args.image_size,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        noise_sigma=args.noise,
    )
    try:
        manifest = generate(args.seed, args.n, params, out_dir)
        manifest = split(manifest, args.labeled_frac, args.seed)
        manifest.save(os.path.join(out_dir, "manifest.json"))
        if args.n_test > 0:
            test_manifest = generate(
                args.seed, args.n_test, params, out_dir,
                id_offset=1_000_000, file_prefix="test",
            )
            test_manifest = split(test_manifest, 1.0, args.seed)
            test_manifest.save(os.path.join(out_dir, "test_manifest.json"))
    except (OSError, ValueError) as e:
        return _fail("generate", f"{out_dir}: {e}")
    print(f"dataset written to {out_dir}: {args.n} train"
          + (f" + {args.n_test} test" if args.n_test else "")
          + f" images, {len(manifest.labeled_ids)} labeled")
    return 0


# -------------------------------------------------------------------- train


_TRAIN_FLAGS = {
    # dest -> config field
    "dataset": "dataset_dir",
    "out": "out_dir",
    "labeled_frac": "labeled_fraction",
    "iterations": "iterations",
    "burn_in": "burn_in",
    "batch_size": "batch_size",
    "sr": "sr",
    "sr_decay_frac": "sr_decay_frac",
    "lam": "lam",
    "r_i": "r_i",
    "ema_alpha": "ema_alpha",
    "teacher_strong_aug": "teacher_strong_aug",
    "supervised_only": "supervised_only",
    "base_lr": "base_lr",
    "warmup_iters": "warmup_iters",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "eval_interval": "eval_interval",
    "checkpoint_interval": "checkpoint_interval",
    "seed": "seed",
    "precision": "precision",
}


def _build_configs(args) -> list[ExperimentConfig]:
    if args.config:
        base = ExperimentConfig.load(args.config)
    else:
        base = ExperimentConfig()
    overrides = {}
    for dest, fieldname in _TRAIN_FLAGS.items():
        val = getattr(args, dest)
        if val is not None:
            overrides[fieldname] = val
    if args.no_adso:
        overrides["adso"] = False
    if args.no_fusion_box:
        overrides["fusion_box"] = False
    if args.no_dex:
        overrides["dex"] = False
    base = dataclasses.replace(base, **overrides)
    base = dataclasses.replace(
        base,
        dataset_dir=base.dataset_dir,
        out_dir=_resolve_out(base.out_dir),
    )

    sigmas = args.sigma if args.sigma is not None else [base.sigma]
    mus = args.mu if args.mu is not None else [base.mu]
    sweep = len(sigmas) > 1 or len(mus) > 1
    configs = []
    for s in sigmas:
        for m in mus:
            sub = base.out_dir
            if sweep:
                parts = []
                if len(sigmas) > 1:
                    parts.append(f"sigma{s:g}")
                if len(mus) > 1:
                    parts.append(f"mu{m:g}")
                sub = os.path.join(base.out_dir, "_".join(parts))
            configs.append(dataclasses.replace(base, sigma=s, mu=m, out_dir=sub))
    return configs


def _run_one(cfg: ExperimentConfig) -> str:
    from .teacher_student import run

    artifacts = run(cfg)
    return artifacts.metrics_csv


def cmd_train(args) -> int:
    try:
        configs = _build_configs(args)
        for cfg in configs:
            cfg.validate()
    except (ConfigError, OSError, ValueError) as e:
        return _fail("config", str(e))
    try:
        if args.workers > 1 and len(configs) > 1:
            ctx = multiprocessing.get_context("spawn")
            with ctx.Pool(args.workers) as pool:
                paths = pool.map(_run_one, configs)
        else:
            paths = [_run_one(cfg) for cfg in configs]
    except (DataError, OSError, ValueError) as e:
        return _fail("train", str(e))
    for p in paths:
        print(f"metrics: {p}")
    return 0


# --------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .teacher_student import _evaluate_model
    from .detector import Detector
    from .evaluate import evaluate_detections

    try:
        model = Detector.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        return _fail("checkpoint", f"{args.checkpoint}: {e}")
    manifest_name = "test_manifest.json" if args.split == "test" else "manifest.json"
    try:
        manifest = DatasetManifest.load(os.path.join(args.dataset, manifest_name))
        dets, gts = _evaluate_model(model, manifest, [e.id for e in manifest.images])
        thresholds = tuple(args.iou) if args.iou else None
        if thresholds:
            report = evaluate_detections(dets, gts, thresholds=thresholds)
        else:
            report = evaluate_detections(dets, gts)
        out = _resolve_out(args.out)
        report.save(out)
    except (DataError, OSError, ValueError) as e:
        return _fail("eval", str(e))
    print(f"report: {out}")
    print(json.dumps({"map": report.map, "ap50": report.ap50, "ap75": report.ap75}))
    return 0


# ------------------------------------------------------------------- report


def cmd_report(args) -> int:
    from .report import render_report

    try:
        written = render_report(args.run, _resolve_out(args.out) if args.out else None)
    except (OSError, ValueError, KeyError) as e:
        return _fail("report", str(e))
    for p in written:
        print(f"figure: {p}")
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semidet",
        description="Semi-supervised single-stage detection on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--n", type=int, default=400, help="training images")
    g.add_argument("--n-test", type=int, default=0, help="held-out test images")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled-frac", type=float, default=0.1)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--noise", type=float, default=SynthParams().noise_sigma)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run (semi-)supervised training")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--out", help="run output directory")
    t.add_argument("--labeled-frac", type=float, dest="labeled_frac")
    t.add_argument("--iterations", type=int)
    t.add_argument("--burn-in", type=int, dest="burn_in")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--sr", type=float)
    t.add_argument("--sr-decay-frac", type=float, dest="sr_decay_frac")
    t.add_argument("--lambda", type=float, dest="lam")
    t.add_argument("--sigma", type=float, nargs="+")
    t.add_argument("--mu", type=float, nargs="+")
    t.add_argument("--r-i", type=float, dest="r_i")
    t.add_argument("--ema-alpha", type=float, dest="ema_alpha")
    t.add_argument("--no-adso", action="store_true")
    t.add_argument("--no-fusion-box", action="store_true")
    t.add_argument("--no-dex", action="store_true")
    t.add_argument("--teacher-strong-aug", action="store_const", const=True,
                   dest="teacher_strong_aug")
    t.add_argument("--supervised-only", action="store_const", const=True,
                   dest="supervised_only")
    t.add_argument("--base-lr", type=float, dest="base_lr")
    t.add_argument("--warmup-iters", type=int, dest="warmup_iters")
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float, dest="weight_decay")
    t.add_argument("--eval-interval", type=int, dest="eval_interval")
    t.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--workers", type=int, default=1,
                   help="parallel processes for sweeps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--out", default="eval_report.json")
    e.add_argument("--iou", type=float, nargs="+",
                   help="IoU thresholds (default 0.50:0.05:0.95)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render figures from a run directory")
    r.add_argument("--run", required=True, help="run directory with metrics.csv")
    r.add_argument("--out", help="figure output directory (default: run dir)")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
