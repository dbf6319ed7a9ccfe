"""Command line: ``tfdlab {train-teacher,distill,eval,ablate,sample}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric divergence,
3 I/O or checkpoint-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runs
from .checkpoint import CheckpointFormatError
from .config import ConfigError, RunConfig, apply_overrides, from_dict, load
from .datasets import UnsupportedError
from .numerics import ContractError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, e.g. anchor.lambda_anchor=0 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="tfdlab", parents=[common],
                                     description="Teacher-feature drifting on toy distributions.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-teacher", parents=[common], help="train and freeze the toy denoiser")

    p = sub.add_parser("distill", parents=[common], help="distil a one-step student")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.add_argument("--stop-at", type=int, default=None, help="stop after this many updates")

    p = sub.add_parser("eval", parents=[common], help="evaluate a student checkpoint")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", default=None, help="teacher checkpoint for feature-space diversity")
    p.add_argument("-n", "--num-samples", type=int, default=None)

    p = sub.add_parser("ablate", parents=[common], help="run a grid of distillation cells")
    p.add_argument("--grid", required=True, help="JSON grid: {axes: {path: [values]}, base?, metric?, budgets?}")
    p.add_argument("--teacher", default=None, help="share one teacher across all cells")
    p.add_argument("--metric", default=None)

    p = sub.add_parser("sample", parents=[common], help="write generated samples to CSV")
    p.add_argument("--student", required=True)
    p.add_argument("-n", "--num-samples", type=int, default=1000)
    p.add_argument("--condition", type=int, default=None)
    return parser


def resolve_config(args, required: bool = True) -> RunConfig | None:
    path = getattr(args, "config", None)
    if path is None:
        if required:
            raise ConfigError("--config is required", "config")
        return None
    raw = load(path).to_dict()
    overrides = list(getattr(args, "override", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    return from_dict(apply_overrides(raw, overrides))


def _out_dir(args, cfg: RunConfig | None, default: str) -> Path:
    out = getattr(args, "out", None) or (cfg.out if cfg is not None else None) or default
    return Path(out)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "ablate":
        grid = runs.load_grid(args.grid)
        cfg = resolve_config(args, required="base" not in grid)
        out = _out_dir(args, cfg, "runs/ablate")
        table = runs.run_ablate(grid, out, cfg, args.metric, args.teacher)
        print(runs.format_table(table))
        statuses = {r["status"] for r in table}
        if statuses == {"ok"}:
            return EXIT_OK
        return EXIT_DIVERGED if "diverged" in statuses else EXIT_CONFIG

    cfg = resolve_config(args)
    if cmd == "train-teacher":
        out = _out_dir(args, cfg, "runs/teacher")
        path = runs.run_train_teacher(cfg, out)
        m = runs.read_manifest(out)["final_metrics"]
        print(f"teacher: {path}  steps {m['steps']}  final loss {m['teacher_loss_final']:.5f}")
    elif cmd == "distill":
        out = _out_dir(args, cfg, "runs/distill")
        result = runs.run_distill(cfg, args.teacher, out, args.resume, args.stop_at)
        finals = runs.read_manifest(out)["final_metrics"]
        shown = {k: finals[k] for k in ("gaussian_frechet", "modes_hit", "max_pairwise_similarity") if k in finals}
        print(f"student: {out / 'student.ckpt'}  steps {result.steps}  {json.dumps(shown)}")
    elif cmd == "eval":
        out = _out_dir(args, cfg, str(Path(args.student).parent / "eval"))
        results = runs.run_eval(cfg, args.student, out, args.teacher, args.num_samples)
        for name, value in results.items():
            print(f"{name:>26s}  {value:.6g}")
    elif cmd == "sample":
        out = _out_dir(args, cfg, str(Path(args.student).parent))
        print(runs.run_sample(cfg, args.student, out, args.num_samples, args.condition))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ContractError, UnsupportedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc} {json.dumps(exc.breakdown)}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
