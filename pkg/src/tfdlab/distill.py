"""One-step student generator and the teacher-feature drifting training loop."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import rng as rngs
from .anchor import anchor_margin_loss, build_anchor_bank, median_bandwidth
from .checkpoint import CheckpointFormatError, read_checkpoint, write_checkpoint
from .datasets import LabeledBatch, SyntheticSpec, sample_batch
from .drift import DriftConfig, tfd_loss
from .metrics import MetricsFile, gaussian_frechet, mode_coverage
from .networks import DenoiserNet
from .numerics import ContractError, DivergenceError, Tensor
from .optim import AdamW, clip_grad_norm, global_norm
from .teacher import FeatureSpec, NoiseSchedule, extract_features, sample_teacher, spec_hash

log = logging.getLogger(__name__)

POSITIVE_SOURCES = ("real_only", "teacher_only", "hybrid")
H_POLICIES = ("median_within_condition", "median_all_pairs")


@dataclass(frozen=True)
class AnchorConfig:
    lambda_anchor: float = 1.0
    alpha: float = 0.5
    temperature: float = 1.0
    h_policy: object = "median_within_condition"   # "median_all_pairs" or a fixed positive float
    normalizer: str = "M"
    grouping: str = "pooled"

    def __post_init__(self):
        if self.lambda_anchor < 0 or self.alpha < 0 or self.temperature <= 0:
            raise ContractError("anchor weights must be >= 0 and temperature > 0")
        if self.normalizer not in ("M", "N"):
            raise ContractError(f"anchor normalizer must be 'M' or 'N', got {self.normalizer!r}")
        if self.grouping not in ("pooled", "per_condition"):
            raise ContractError(f"anchor grouping must be 'pooled' or 'per_condition', got {self.grouping!r}")
        if self.h_policy not in H_POLICIES and not (
                isinstance(self.h_policy, (int, float)) and self.h_policy > 0):
            raise ContractError(f"h_policy must be one of {H_POLICIES} or a positive number, got {self.h_policy!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 100
    clip_norm: float = 10.0
    total_steps: int = 5000
    conditions_per_step: int = 8
    gen_per_condition: int = 4
    pos_per_condition: int = 4
    positive_source: str = "real_only"
    real_pool_size: int = 64
    teacher_sampling_steps: int = 20
    log_interval: int = 50
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.positive_source not in POSITIVE_SOURCES:
            raise ContractError(f"positive_source must be one of {POSITIVE_SOURCES}")
        for name in ("lr", "clip_norm", "conditions_per_step", "gen_per_condition", "pos_per_condition",
                     "teacher_sampling_steps", "log_interval", "checkpoint_interval"):
            if not getattr(self, name) > 0:
                raise ContractError(f"train.{name} must be positive")
        if self.total_steps < 0 or self.warmup_steps < 0 or self.weight_decay < 0:
            raise ContractError("total_steps, warmup_steps and weight_decay must be >= 0")
        if self.warmup_steps > max(self.total_steps, 1) and self.total_steps > 0:
            raise ContractError("warmup_steps must not exceed total_steps")


@dataclass(frozen=True)
class MetricsConfig:
    eval_samples: int = 4000
    trace_samples: int = 800
    mmd_bandwidths: tuple = (0.1, 0.5, 1.0)
    radius_mult: float = 3.0
    diversity_group: int = 8
    budgets: tuple = (1000, 2500, 5000)

    def __post_init__(self):
        object.__setattr__(self, "mmd_bandwidths", tuple(float(b) for b in self.mmd_bandwidths))
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))


# ---------------------------------------------------------------------------
# student

class GeneratorNet:
    """One-step generator: a denoiser evaluated at a fixed input noise level."""

    def __init__(self, net: DenoiserNet, sigma_in: float):
        self.net = net
        self.sigma_in = float(sigma_in)
        self.forward_passes = 0

    @property
    def dim(self) -> int:
        return self.net.dim

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    def __call__(self, eps, labels) -> Tensor:
        eps = nx.tensor(eps)
        self.forward_passes += eps.shape[0]
        return self.net(eps, self.sigma_in, labels)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def checksum(self) -> str:
        return self.net.checksum()

    def snapshot(self) -> "GeneratorNet":
        return GeneratorNet(self.net.copy(), self.sigma_in)


def init_student_from_teacher(teacher: DenoiserNet, schedule: NoiseSchedule) -> GeneratorNet:
    """Copy the teacher's weights; the student reads noise as a maximally-noised sample."""
    net = teacher.copy()
    if net.architecture() != teacher.architecture():
        raise ContractError("student and teacher architectures differ")
    return GeneratorNet(net, schedule.sigma_max)


def sample(student: GeneratorNet, n: int, condition=None, seed: np.random.Generator | None = None):
    """Draw ``n`` samples with one forward pass each.

    ``condition`` is a class index, an array of ``n`` labels, or None for
    balanced labels ``arange(n) % K``. Returns ``(points, labels)``.
    """
    rng = seed if seed is not None else np.random.default_rng(0)
    if condition is None:
        labels = np.arange(n) % student.num_classes
    elif np.ndim(condition) == 0:
        labels = np.full(n, int(condition))
    else:
        labels = np.asarray(condition, dtype=np.int64)
        if labels.shape != (n,):
            raise ContractError(f"expected {n} labels, got {labels.shape}")
    eps = student.sigma_in * rng.standard_normal((n, student.dim))
    return student(nx.constant(eps), labels).data.copy(), labels


def save_student(path, student: GeneratorNet, spec: SyntheticSpec, **extra) -> None:
    header = {"kind": "student", "architecture": student.net.architecture(),
              "sigma_in": student.sigma_in, "spec_hash": spec_hash(spec), **extra}
    write_checkpoint(path, student.net.flat_parameters(), header)


def load_student(path, expect_spec: SyntheticSpec | None = None) -> GeneratorNet:
    flat, header = read_checkpoint(path)
    if header.get("kind") != "student":
        raise CheckpointFormatError(f"{path}: not a student checkpoint (kind={header.get('kind')!r})")
    if expect_spec is not None and header.get("spec_hash") != spec_hash(expect_spec):
        raise CheckpointFormatError(f"{path}: dataset hash does not match config")
    net = DenoiserNet(**header["architecture"])
    net.load_flat(flat)
    return GeneratorNet(net, header["sigma_in"])


# ---------------------------------------------------------------------------
# positives

@dataclass
class PositiveSet:
    points: np.ndarray
    provenance: list

    def __len__(self) -> int:
        return len(self.points)


def build_positive_set(condition: int, n_plus: int, real_pool: LabeledBatch | None, teacher: DenoiserNet,
                       schedule: NoiseSchedule, policy: str, seed: np.random.Generator,
                       sampling_steps: int = 20) -> PositiveSet:
    """Condition-matched real points, topped up with teacher samples when short."""
    if n_plus < 1:
        raise ContractError("n_plus must be >= 1")
    if policy not in POSITIVE_SOURCES:
        raise ContractError(f"unknown positive policy {policy!r}")
    real = np.empty((0, teacher.dim))
    if policy != "teacher_only" and real_pool is not None:
        matched = real_pool.select(condition)
        if len(matched) > n_plus:
            matched = matched[np.sort(seed.choice(len(matched), n_plus, replace=False))]
        real = matched
    if policy == "real_only" and len(real) < n_plus:
        raise ContractError(f"condition {condition}: {len(real)} real points, {n_plus} required")
    missing = n_plus - len(real)
    if missing == 0:
        return PositiveSet(real.copy(), ["real"] * n_plus)
    fills = sample_teacher(teacher, np.full(missing, condition), schedule, seed, sampling_steps)
    return PositiveSet(np.concatenate([real, fills]), ["real"] * len(real) + ["teacher"] * missing)


# ---------------------------------------------------------------------------
# training

@dataclass
class DistillSetup:
    """Everything a training step needs besides the student."""
    spec: SyntheticSpec
    features: FeatureSpec
    drift: DriftConfig
    anchor: AnchorConfig
    train: TrainConfig
    metrics: MetricsConfig
    seed: int


@dataclass
class DistillState:
    student: GeneratorNet
    optimizer: AdamW
    step: int = 0
    bandwidth: dict | None = None
    real_pool: LabeledBatch | None = None


@dataclass
class StepLosses:
    total: float
    tfd: float
    anchor: float
    breakdown: dict
    violations: int
    support_mean: float
    grad_norm: float = float("nan")
    clipped_norm: float = float("nan")


def make_state(student: GeneratorNet, setup: DistillSetup) -> DistillState:
    t = setup.train
    opt = AdamW(student.parameters(), lr=t.lr, weight_decay=t.weight_decay, warmup_steps=t.warmup_steps)
    pool = None
    if t.positive_source == "hybrid":
        pool = sample_batch(setup.spec, t.real_pool_size, rngs.seed_stream(setup.seed, rngs.DISTILL_STEP, 10**9))
    return DistillState(student, opt, 0, None, pool)


def _positives(setup: DistillSetup, state: DistillState, teacher, schedule, conds, rng):
    t = setup.train
    if t.positive_source == "real_only":
        pts = [sample_batch(setup.spec, t.pos_per_condition, rng, class_filter=int(c)).points.data for c in conds]
        return np.concatenate(pts)
    sets = [build_positive_set(int(c), t.pos_per_condition, state.real_pool, teacher, schedule,
                               t.positive_source, rng, t.teacher_sampling_steps) for c in conds]
    return np.concatenate([s.points for s in sets])


def compute_losses(student: GeneratorNet, teacher: DenoiserNet, schedule: NoiseSchedule, setup: DistillSetup,
                   state: DistillState, step: int):
    """Forward part of one training step; randomness comes from the ``step`` stream only.

    Returns ``(total, tfd, anchor, breakdown, report_rows, bandwidth)`` where the
    first three are graph tensors.
    """
    t, a = setup.train, setup.anchor
    rng = rngs.seed_stream(setup.seed, rngs.DISTILL_STEP, step)
    k = setup.spec.num_classes
    b = t.conditions_per_step
    conds = rng.permutation(k)[:b] if b <= k else rng.integers(0, k, size=b)
    pos_labels = np.repeat(conds, t.pos_per_condition)
    gen_labels = np.repeat(conds, t.gen_per_condition)

    positives = _positives(setup, state, teacher, schedule, conds, rng)
    eps = student.sigma_in * rng.standard_normal((len(gen_labels), student.dim))
    generated = student(nx.constant(eps), gen_labels)

    real_feats = extract_features(teacher, nx.constant(positives), pos_labels, setup.features, rng,
                                  schedule.sigma_min)
    real_feats = {l: nx.stop_gradient(v) for l, v in real_feats.items()}
    gen_feats = extract_features(teacher, generated, gen_labels, setup.features, rng, schedule.sigma_min)

    tfd, breakdown = tfd_loss(real_feats, gen_feats, setup.drift, gen_labels, pos_labels)

    bandwidth = state.bandwidth
    if bandwidth is None and a.h_policy not in H_POLICIES:
        bandwidth = {l: float(a.h_policy) for l in setup.features.layers}
    bank = build_anchor_bank(real_feats, len(pos_labels), rng, bandwidth, a.alpha, a.temperature, pos_labels)
    if bandwidth is None and a.h_policy == "median_all_pairs":
        bank.bandwidth = {l: median_bandwidth(v, a.temperature) for l, v in bank.anchors.items()}
    bandwidth = dict(bank.bandwidth)

    anchor = None
    violations, supports = 0, []
    for layer in bank.layers:
        if a.grouping == "pooled":
            groups = [(np.ones(len(bank.anchors[layer]), bool), np.ones(len(gen_labels), bool))]
        else:
            groups = [(bank.labels == c, gen_labels == c) for c in conds]
        for anchor_rows, gen_rows in groups:
            anchors = bank.anchors[layer][anchor_rows]
            z = gen_feats[layer] if gen_rows.all() else nx.take_rows(gen_feats[layer], np.flatnonzero(gen_rows))
            part, report = anchor_margin_loss(anchors, z, bank.bandwidth[layer], a.alpha, a.normalizer)
            part = nx.scale(part, 1.0 / len(groups))
            anchor = part if anchor is None else anchor + part
            violations += report.violations
            supports.append(report.generated_support.mean())

    total = tfd + nx.scale(anchor, a.lambda_anchor)
    return total, tfd, anchor, breakdown, (violations, float(np.mean(supports))), bandwidth


def train_step(state: DistillState, teacher: DenoiserNet, schedule: NoiseSchedule, setup: DistillSetup) -> StepLosses:
    step = state.step
    total, tfd, anchor, breakdown, (violations, support), bandwidth = compute_losses(
        state.student, teacher, schedule, setup, state, step)
    values = {"total": total.item(), "tfd": tfd.item(), "anchor": anchor.item()}
    if not all(np.isfinite(v) for v in values.values()):
        raise DivergenceError("non-finite loss", step, {**values, **breakdown})
    state.optimizer.zero_grad()
    nx.backward(total)
    params = state.student.parameters()
    norm = global_norm(params)
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient", step, {**values, **breakdown})
    clip_grad_norm(params, setup.train.clip_norm)
    clipped = global_norm(params)
    state.optimizer.step()
    state.step += 1
    if state.bandwidth is None:
        state.bandwidth = bandwidth
    return StepLosses(values["total"], values["tfd"], values["anchor"], breakdown, violations, support,
                      norm, clipped)


# ---------------------------------------------------------------------------
# loop

@dataclass
class DistillResult:
    student: GeneratorNet
    rows: list = field(default_factory=list)
    teacher_checksum: str = ""
    steps: int = 0


class TraceEvaluator:
    """Fixed noise and held-out reference used for the logged quality trace."""

    def __init__(self, setup: DistillSetup, teacher: DenoiserNet, schedule: NoiseSchedule):
        m = setup.metrics
        self.setup = setup
        self.teacher = teacher
        self.schedule = schedule
        self.reference = sample_batch(setup.spec, m.trace_samples,
                                      rngs.seed_stream(setup.seed, rngs.HELDOUT)).points.data

    def __call__(self, student: GeneratorNet) -> list[tuple[str, float]]:
        m = self.setup.metrics
        counter = student.forward_passes
        pts, labels = sample(student, m.trace_samples, None, rngs.seed_stream(self.setup.seed, rngs.TRACE))
        student.forward_passes = counter
        rows = [("gaussian_frechet", gaussian_frechet(pts, self.reference))]
        if self.setup.spec.family == "gaussian_mixture_ring":
            feats = diversity_features(self.teacher, pts, labels, self.setup.features, self.schedule)
            cov = mode_coverage(pts, self.setup.spec, m.radius_mult, feats, labels, m.diversity_group)
            rows += [("modes_hit", float(cov.modes_hit)),
                     ("high_quality_fraction", cov.high_quality_fraction),
                     ("max_pairwise_similarity", cov.max_pairwise_similarity)]
        return rows


def diversity_features(teacher: DenoiserNet, points, labels, fs: FeatureSpec, schedule: NoiseSchedule) -> np.ndarray:
    """Clean teacher features of the deepest drift layer."""
    clean = FeatureSpec((max(fs.layers),), 0.0, fs.pool_size)
    feats = extract_features(teacher, nx.constant(points), labels, clean, np.random.default_rng(0),
                             schedule.sigma_min)
    return feats[max(fs.layers)].data


def _loss_rows(step: int, losses: StepLosses) -> list:
    rows = [(step, "loss_total", losses.total), (step, "loss_tfd", losses.tfd),
            (step, "loss_anchor", losses.anchor)]
    rows += [(step, f"tfd_layer{l}", v) for l, v in sorted(losses.breakdown.items())]
    rows += [(step, "anchor_violations", float(losses.violations)),
             (step, "anchor_support_mean", losses.support_mean),
             (step, "grad_norm", losses.grad_norm), (step, "grad_norm_clipped", losses.clipped_norm)]
    return rows


def _save_state(out: Path, state: DistillState, spec: SyntheticSpec) -> None:
    save_student(out / "student.ckpt", state.student, spec, step=state.step)
    write_checkpoint(out / "optimizer.ckpt", state.optimizer.state_arrays(),
                     {"kind": "optimizer", "t": state.optimizer.t, "step": state.step})
    meta = {"step": state.step, "bandwidth": {str(k): v for k, v in (state.bandwidth or {}).items()}}
    tmp = out / "state.json.tmp"
    tmp.write_text(json.dumps(meta, sort_keys=True))
    os.replace(tmp, out / "state.json")


def _load_state(out: Path, state: DistillState, spec: SyntheticSpec) -> None:
    meta = json.loads((out / "state.json").read_text())
    student = load_student(out / "student.ckpt", spec)
    for name, t in student.net.params.items():
        state.student.net.params[name].data = t.data.copy()
    flat, header = read_checkpoint(out / "optimizer.ckpt")
    if header.get("step") != meta["step"]:
        raise CheckpointFormatError("optimizer and state checkpoints disagree on the step")
    state.optimizer.load_state_arrays(flat, header["t"])
    state.step = int(meta["step"])
    state.bandwidth = {int(k): float(v) for k, v in meta["bandwidth"].items()} or None


def distill(teacher: DenoiserNet, schedule: NoiseSchedule, setup: DistillSetup, out_dir=None,
            student: GeneratorNet | None = None, resume: bool = False, stop_at: int | None = None) -> DistillResult:
    """Run the training loop for ``setup.train.total_steps`` updates.

    Metrics are logged at step 0 and every ``log_interval`` updates; with
    ``out_dir`` they are appended to ``metrics.csv`` and the student, optimizer
    and loop state are checkpointed every ``checkpoint_interval`` updates and
    at the end. ``resume`` continues from the last checkpoint in ``out_dir``;
    ``stop_at`` ends the loop early (as an interruption would).
    """
    t = setup.train
    checksum = teacher.checksum()
    if student is None:
        student = init_student_from_teacher(teacher, schedule)
    state = make_state(student, setup)
    evaluator = TraceEvaluator(setup, teacher, schedule)
    out = Path(out_dir) if out_dir is not None else None
    mfile = None
    rows: list = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "state.json").exists():
            _load_state(out, state, setup.spec)
            mfile = MetricsFile(out / "metrics.csv")
            mfile.truncate_after(state.step)
            log.info("resumed from step %d", state.step)
        else:
            if (out / "metrics.csv").exists():
                (out / "metrics.csv").unlink()
            mfile = MetricsFile(out / "metrics.csv")

    def emit(new_rows):
        rows.extend(new_rows)
        if mfile is not None:
            mfile.extend(new_rows)

    if state.step == 0:
        emit([(0, name, v) for name, v in evaluator(state.student)])

    end = t.total_steps if stop_at is None else min(stop_at, t.total_steps)
    while state.step < end:
        losses = train_step(state, teacher, schedule, setup)
        s = state.step
        if s % t.log_interval == 0 or s == t.total_steps:
            emit(_loss_rows(s, losses) + [(s, name, v) for name, v in evaluator(state.student)])
            log.info("step %d total %.5f tfd %.5f anchor %.5f", s, losses.total, losses.tfd, losses.anchor)
            if teacher.checksum() != checksum:
                raise ContractError("teacher parameters changed during distillation")
        if out is not None and (s % t.checkpoint_interval == 0 or s == end):
            _save_state(out, state, setup.spec)
    return DistillResult(state.student, rows, checksum, state.step)
