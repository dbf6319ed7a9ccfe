"""Run drivers shared by the command line and the test-suite: teacher training,
distillation, evaluation, sampling and ablation grids, each leaving a manifest."""
from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import logging
import os
import platform
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import rng as rngs
from .config import ConfigError, RunConfig, apply_overrides, from_dict, load
from .datasets import sample_batch
from .distill import distill, diversity_features, load_student, sample
from .metrics import (budgeted_best, gaussian_frechet, mmd_squared, mode_coverage,
                      read_metrics)
from .networks import DenoiserNet
from .numerics import DivergenceError
from .teacher import load_teacher, save_teacher, train_teacher

log = logging.getLogger(__name__)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"tfdlab": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_json_atomic(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


def write_manifest(out: Path, cfg: RunConfig, kind: str, started: str, final_metrics: dict,
                   status: str = "ok", axis_values: dict | None = None, **extra) -> Path:
    manifest = {
        "kind": kind,
        "status": status,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "started": started,
        "finished": _now(),
        "versions": versions(),
        "final_metrics": final_metrics,
        "deviations": cfg.deviations(),
        "axis_values": axis_values or {},
        **extra,
    }
    path = Path(out) / "manifest.json"
    write_json_atomic(path, manifest)
    return path


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# teacher

def build_teacher_net(cfg: RunConfig) -> DenoiserNet:
    t = cfg.teacher
    return DenoiserNet(cfg.dataset.dimension, cfg.dataset.num_classes, t.widths, t.embed_dim,
                       rng=rngs.seed_stream(cfg.seed, rngs.TEACHER_INIT))


def run_train_teacher(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    net = build_teacher_net(cfg)
    cfg.features.validate(net)
    schedule = cfg.teacher.schedule()
    net, trace = train_teacher(cfg.dataset, net, schedule, cfg.teacher.steps, cfg.teacher.lr,
                               rngs.seed_stream(cfg.seed, rngs.TEACHER_TRAIN), cfg.teacher.batch_size)
    path = out / "teacher.ckpt"
    save_teacher(path, net, schedule, cfg.dataset, teacher_hash=cfg.teacher_hash())
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "name", "value"))
        for i, v in enumerate(trace):
            w.writerow((i, "teacher_loss", repr(float(v))))
    tail = trace[-max(1, len(trace) // 10):] if trace else [float("nan")]
    summary = {"teacher_loss_final": float(np.mean(tail)), "steps": len(trace), "checksum": net.checksum()}
    write_manifest(out, cfg, "train-teacher", started, summary, artifacts={"teacher": str(path)})
    return path


def teacher_for(cfg: RunConfig, cache_dir) -> Path:
    """Train the teacher for ``cfg`` unless one with the same teacher hash is cached."""
    cache = Path(cache_dir) / cfg.teacher_hash()[:16]
    path = cache / "teacher.ckpt"
    if not path.exists():
        run_train_teacher(cfg, cache)
    return path


# ---------------------------------------------------------------------------
# distillation

def final_values(rows) -> dict:
    last: dict[str, tuple[int, float]] = {}
    for step, name, value in rows:
        last[name] = (step, value)
    return {name: v for name, (_, v) in sorted(last.items())}


def budget_table(rows, name: str, budgets) -> dict:
    trace = [(s, v) for s, n, v in rows if n == name]
    if not trace:
        return {int(b): float("nan") for b in budgets}
    return {int(b): v for b, v in budgeted_best(trace, budgets).items()}


def run_distill(cfg: RunConfig, teacher_path, out, resume: bool = False, stop_at: int | None = None,
                axis_values: dict | None = None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    teacher, schedule, _ = load_teacher(teacher_path, cfg.dataset)
    cfg.features.validate(teacher)
    result = distill(teacher, schedule, cfg.setup(), out, resume=resume, stop_at=stop_at)
    rows = read_metrics(out / "metrics.csv")
    finals = final_values(rows)
    finals["budgeted_best_gaussian_frechet"] = {
        str(b): v for b, v in budget_table(rows, "gaussian_frechet", cfg.metrics.budgets).items()}
    done = result.steps >= cfg.train.total_steps
    write_manifest(out, cfg, "distill", started, finals, "ok" if done else "interrupted", axis_values,
                   teacher_path=str(Path(teacher_path).resolve()), teacher_checksum=result.teacher_checksum,
                   steps=result.steps, forward_passes=result.student.forward_passes,
                   artifacts={"student": str(out / "student.ckpt"), "metrics": str(out / "metrics.csv")})
    return result


# ---------------------------------------------------------------------------
# evaluation and sampling

def evaluate(cfg: RunConfig, student, teacher=None, schedule=None, n: int | None = None) -> dict:
    """All evaluation metrics on ``n`` balanced-label samples against held-out data."""
    m = cfg.metrics
    n = m.eval_samples if n is None else int(n)
    points, labels = sample(student, n, None, rngs.seed_stream(cfg.seed, rngs.EVAL))
    reference = sample_batch(cfg.dataset, n, rngs.seed_stream(cfg.seed, rngs.HELDOUT)).points.data
    results = {"gaussian_frechet": gaussian_frechet(points, reference),
               "mmd": mmd_squared(points, reference, m.mmd_bandwidths)}
    if cfg.dataset.family == "gaussian_mixture_ring":
        feats = None
        if teacher is not None:
            feats = diversity_features(teacher, points, labels, cfg.features, schedule)
        cov = mode_coverage(points, cfg.dataset, m.radius_mult, feats, labels, m.diversity_group)
        results.update(modes_hit=float(cov.modes_hit), high_quality_fraction=cov.high_quality_fraction,
                       max_pairwise_similarity=cov.max_pairwise_similarity)
    results["label_count_spread"] = float(np.ptp(np.bincount(labels, minlength=cfg.dataset.num_classes)))
    return results


def run_eval(cfg: RunConfig, student_path, out, teacher_path=None, n: int | None = None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    student = load_student(student_path, cfg.dataset)
    if teacher_path is None:
        manifest = Path(student_path).parent / "manifest.json"
        if manifest.exists():
            teacher_path = json.loads(manifest.read_text()).get("teacher_path")
    teacher = schedule = None
    if teacher_path is not None:
        teacher, schedule, _ = load_teacher(teacher_path, cfg.dataset)
    results = evaluate(cfg, student, teacher, schedule, n)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "name", "value"))
        for name, value in results.items():
            w.writerow((0, name, repr(float(value))))
    write_manifest(out, cfg, "eval", started, results, student_path=str(student_path),
                   teacher_path=str(teacher_path) if teacher_path else None)
    return results


def run_sample(cfg: RunConfig, student_path, out, n: int, condition: int | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    student = load_student(student_path, cfg.dataset)
    points, labels = sample(student, n, condition, rngs.seed_stream(cfg.seed, rngs.EVAL))
    path = out / "samples.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])] + ["label"])
        for p, l in zip(points, labels):
            w.writerow([repr(float(v)) for v in p] + [int(l)])
    return path


# ---------------------------------------------------------------------------
# ablation grids

def load_grid(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None


def expand_grid(base: dict, axes: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of ``axes`` (dotted path -> values) applied to ``base``."""
    if not axes:
        raise ConfigError("ablation grid needs at least one axis", "axes")
    names = sorted(axes)
    for name in names:
        if not isinstance(axes[name], list) or not axes[name]:
            raise ConfigError("axis values must be a nonempty list", f"axes.{name}")
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        values = dict(zip(names, combo))
        cells.append((values, apply_overrides(base, values)))
    return cells


def run_ablate(grid: dict, out, base_cfg: RunConfig | None = None, metric: str | None = None,
               teacher_path=None) -> list[dict]:
    """Run every distinct cell and return the budgeted-best table rows.

    ``grid`` holds ``axes`` (dotted path -> list of values) and optionally
    ``base`` (a config object), ``metric`` and ``budgets``. Cells whose
    configuration hashes coincide run once. A failing cell is recorded with
    its error and the grid carries on.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    unknown = sorted(set(grid) - {"base", "axes", "metric", "budgets"})
    if unknown:
        raise ConfigError(f"unknown grid field {unknown[0]!r}", unknown[0])
    if base_cfg is None:
        if "base" not in grid:
            raise ConfigError("grid needs a base config (inline 'base' or --config)", "base")
        base_cfg = from_dict(grid["base"])
    elif "base" in grid:
        base_cfg = from_dict(apply_overrides(base_cfg.to_dict(), _flat_items(grid["base"])))
    metric = metric or grid.get("metric", "gaussian_frechet")
    budgets = [int(b) for b in grid.get("budgets", base_cfg.metrics.budgets)]
    if not budgets:
        raise ConfigError("budgets must be nonempty", "budgets")

    table, seen = [], {}
    for values, raw in expand_grid(base_cfg.to_dict(), grid.get("axes", {})):
        try:
            cfg = from_dict(raw)
        except ConfigError as exc:
            table += [_cell_row("invalid", values, b, float("nan"), "config", str(exc)) for b in budgets]
            continue
        h = cfg.hash()
        cell = h[:12]
        if h in seen:
            log.info("cell %s duplicates %s, skipped", values, seen[h])
            continue
        seen[h] = values
        cell_dir = out / "cells" / cell
        status, error, rows = "ok", "", []
        try:
            tpath = teacher_path or teacher_for(cfg, out / "teachers")
            run_distill(cfg, tpath, cell_dir, axis_values=values)
            rows = read_metrics(cell_dir / "metrics.csv")
        except DivergenceError as exc:
            status, error = "diverged", str(exc)
        except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the grid
            status, error = "failed", f"{type(exc).__name__}: {exc}"
            log.debug("cell %s failed\n%s", cell, traceback.format_exc())
        if status != "ok":
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_json_atomic(cell_dir / "failure.json", {"axis_values": values, "status": status, "error": error})
        best = budget_table(rows, metric, budgets) if rows else {b: float("nan") for b in budgets}
        table += [_cell_row(cell, values, b, best[b], status, error) for b in budgets]

    write_table(out, table, metric)
    return table


def _flat_items(d: dict, prefix: str = "") -> dict:
    items = {}
    for k, v in d.items():
        if isinstance(v, dict):
            items.update(_flat_items(v, f"{prefix}{k}."))
        else:
            items[f"{prefix}{k}"] = v
    return items


def _cell_row(cell, values, budget, value, status, error) -> dict:
    return {"cell": cell, "axes": dict(values), "budget": int(budget), "value": float(value),
            "status": status, "error": error}


def write_table(out: Path, table: list[dict], metric: str) -> None:
    axis_names = sorted({k for row in table for k in row["axes"]})
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *axis_names, "budget", f"best_{metric}", "status"])
        for row in table:
            w.writerow([row["cell"], *(json.dumps(row["axes"].get(a)) for a in axis_names),
                        row["budget"], repr(row["value"]), row["status"]])
    write_json_atomic(out / "table.json", {"metric": metric, "rows": table})


def format_table(table: list[dict]) -> str:
    budgets = sorted({r["budget"] for r in table})
    cells: dict[str, dict] = {}
    for r in table:
        cells.setdefault(r["cell"], {"axes": r["axes"], "status": r["status"]})[r["budget"]] = r["value"]
    lines = ["cell          " + "".join(f"{b:>12d}" for b in budgets) + "  axes"]
    for cell, info in cells.items():
        vals = "".join(f"{info.get(b, float('nan')):>12.5f}" for b in budgets)
        lines.append(f"{cell:<14s}{vals}  {json.dumps(info['axes'], sort_keys=True)} {info['status']}")
    return "\n".join(lines)


__all__ = [
    "run_train_teacher", "run_distill", "run_eval", "run_sample", "run_ablate", "evaluate",
    "teacher_for", "expand_grid", "load_grid", "format_table", "write_manifest", "read_manifest", "load",
]
