"""Run configuration: strict JSON parsing, dotted overrides and canonical hashing."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import SyntheticSpec
from .distill import AnchorConfig, DistillSetup, MetricsConfig, TrainConfig
from .drift import DriftConfig
from .numerics import ContractError
from .teacher import FeatureSpec, NoiseSchedule


class ConfigError(ValueError):
    """Malformed or invalid configuration; carries the offending field path."""

    def __init__(self, message: str, field_path: str | None = None, line: int | None = None):
        where = ""
        if field_path:
            where += f" [field {field_path}]"
        if line is not None:
            where += f" [line {line}]"
        super().__init__(message + where)
        self.field = field_path
        self.line = line


@dataclass(frozen=True)
class TeacherConfig:
    widths: tuple = (128,) * 6
    embed_dim: int = 16
    steps: int = 5000
    lr: float = 1e-3
    batch_size: int = 256
    sigma_min: float = 0.01
    sigma_max: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ContractError("teacher.widths must be a nonempty list of positive ints")
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ContractError("teacher.steps >= 0, lr > 0, batch_size >= 1, embed_dim even and >= 2 required")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max)


SECTIONS = {
    "dataset": SyntheticSpec,
    "teacher": TeacherConfig,
    "features": FeatureSpec,
    "drift": DriftConfig,
    "anchor": AnchorConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
}

# Reference large-scale settings; a manifest lists every field where the run
# differs from them.
REFERENCE_DEFAULTS = {
    "train.lr": 2e-6,
    "train.weight_decay": 0.01,
    "train.warmup_steps": 500,
    "train.clip_norm": 10.0,
    "train.gen_per_condition": 4,
    "train.pos_per_condition": 4,
    "train.positive_source": "real_only",
    "features.sigma_tf": 0.1,
    "features.pool_size": 4,
    "drift.radii": [0.02, 0.05, 0.2],
    "anchor.lambda_anchor": 1.0,
    "anchor.alpha": 0.5,
    "anchor.temperature": 1.0,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: SyntheticSpec
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    drift: DriftConfig = field(default_factory=DriftConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    out: str | None = None

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out": self.out}
        for name in SECTIONS:
            d[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return d

    def canonical(self) -> str:
        """Canonical JSON of everything that influences results (``out`` excluded)."""
        d = self.to_dict()
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def teacher_hash(self) -> str:
        d = self.to_dict()
        raw = json.dumps({"seed": d["seed"], "dataset": d["dataset"], "teacher": d["teacher"]},
                         sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()

    def setup(self) -> DistillSetup:
        return DistillSetup(self.dataset, self.features, self.drift, self.anchor, self.train, self.metrics, self.seed)

    def deviations(self) -> list[dict]:
        """Settings that differ from the published reference values."""
        flat = flatten(self.to_dict())
        out = []
        for key, ref in REFERENCE_DEFAULTS.items():
            if flat.get(key) != ref:
                out.append({"field": key, "value": flat.get(key), "reference": ref})
        return out

    def with_overrides(self, overrides) -> "RunConfig":
        return from_dict(apply_overrides(self.to_dict(), overrides))


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section must be an object, got {type(raw).__name__}", name)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r}", f"{name}.{unknown[0]}")
    try:
        return cls(**raw)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    allowed = {"seed", "out", *SECTIONS}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r}", unknown[0])
    if "seed" not in raw:
        raise ConfigError("missing required field 'seed'", "seed")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}", "seed")
    if "dataset" not in raw or not isinstance(raw["dataset"], dict) or "family" not in raw["dataset"]:
        raise ConfigError("missing required field 'dataset.family'", "dataset.family")
    sections = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string path", "out")
    return RunConfig(seed=seed, out=out, **sections)


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return from_dict(raw)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_override(item: str) -> tuple[str, object]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def apply_overrides(raw: dict, overrides) -> dict:
    """Return a copy of ``raw`` with dotted-path assignments applied."""
    raw = copy.deepcopy(raw)
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
    for key, value in items:
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"cannot descend into non-object {p!r}", key)
            node = child
        node[parts[-1]] = value
    return raw
