"""Kernel attraction-repulsion fields and the fixed-point drifting losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class DriftConfig:
    radii: tuple = (0.02, 0.05, 0.2)
    aggregate: str = "mean_of_fields"
    eps_denominator: float = 1e-12
    # drop each query's own weight from the in-batch repulsion term of the loss
    exclude_self: bool = False

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if not self.radii or any(r <= 0 for r in self.radii):
            raise ContractError(f"radii must be a nonempty list of positive values, got {self.radii}")
        if self.aggregate != "mean_of_fields":
            raise ContractError(f"unsupported aggregate {self.aggregate!r}")


@dataclass
class FieldBatch:
    queries: np.ndarray
    field_values: np.ndarray


def _values(t) -> np.ndarray:
    return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


def laplace_kernel(x, y, tau: float) -> float:
    if tau <= 0:
        raise ContractError("tau must be positive")
    d = _values(x) - _values(y)
    return float(np.exp(-np.sqrt((d * d).sum()) / tau))


def _mean_shift(x: np.ndarray, samples: np.ndarray, tau: float, eps: float,
                skip_diagonal: bool = False) -> np.ndarray:
    # x: (n, d), samples: (m, d) -> (n, d)
    diff = samples[None, :, :] - x[:, None, :]
    k = np.exp(-np.sqrt((diff * diff).sum(axis=2)) / tau)
    if skip_diagonal:
        np.fill_diagonal(k, 0.0)
    return (k[:, :, None] * diff).sum(axis=1) / (k.sum(axis=1)[:, None] + eps)


def mean_shift_field(x, samples, tau: float, eps: float = 1e-12) -> np.ndarray:
    """Kernel-weighted mean displacement from ``x`` towards ``samples``."""
    samples = np.atleast_2d(_values(samples))
    if samples.shape[0] < 1:
        raise ContractError("need at least one sample")
    return _mean_shift(_values(x)[None, :], samples, tau, eps)[0]


def drift_field(x, positives, negatives, cfg: DriftConfig, self_negatives: bool = False) -> FieldBatch:
    """Attraction to ``positives`` minus attraction to ``negatives``, averaged over radii.

    Works on plain values; nothing here is recorded for differentiation.
    ``self_negatives`` declares that row i of ``negatives`` is query i; with
    ``cfg.exclude_self`` that row is then left out of query i's repulsion.
    """
    q = np.atleast_2d(_values(x))
    pos = np.atleast_2d(_values(positives))
    neg = np.atleast_2d(_values(negatives))
    if len(pos) < 1 or len(neg) < 1:
        raise ContractError("drift_field needs at least one positive and one negative")
    skip = bool(cfg.exclude_self and self_negatives)
    if skip and (neg.shape != q.shape or len(q) < 2):
        raise ContractError("self-excluded repulsion needs the queries themselves (at least 2) as negatives")
    total = np.zeros_like(q)
    for tau in cfg.radii:
        total += (_mean_shift(q, pos, tau, cfg.eps_denominator)
                  - _mean_shift(q, neg, tau, cfg.eps_denominator, skip))
    return FieldBatch(q, total / len(cfg.radii))


def drift_targets(generated, positives, negatives, cfg: DriftConfig, self_negatives: bool = False) -> Tensor:
    """Frozen transported targets ``generated + V``."""
    field = drift_field(generated, positives, negatives, cfg, self_negatives)
    return nx.constant(field.queries + field.field_values)


def drift_loss(generated: Tensor, targets: Tensor) -> Tensor:
    """Mean over rows of ``||generated - targets||^2``; targets must be detached."""
    targets = nx.tensor(targets)
    if targets.requires_grad:
        raise ContractError("drift targets must be detached from the graph")
    if generated.shape != targets.shape:
        raise nx.DimensionError(f"drift_loss: shapes {generated.shape} and {targets.shape} differ")
    return nx.scale(nx.sum(nx.square(generated - targets)), 1.0 / generated.shape[0])


def grouped_targets(gen: np.ndarray, real: np.ndarray, cfg: DriftConfig,
                    gen_groups=None, real_groups=None) -> np.ndarray:
    """Targets with the field estimated separately inside each condition group."""
    if gen_groups is None:
        return drift_targets(gen, real, gen, cfg, self_negatives=True).data
    gen_groups = np.asarray(gen_groups)
    real_groups = np.asarray(real_groups)
    out = np.empty_like(gen)
    for c in np.unique(gen_groups):
        rows = gen_groups == c
        pos = real[real_groups == c]
        if len(pos) == 0:
            raise ContractError(f"no positives for condition {c}")
        out[rows] = drift_targets(gen[rows], pos, gen[rows], cfg, self_negatives=True).data
    return out


def tfd_loss(real_feats: dict, gen_feats: dict, cfg: DriftConfig, gen_groups=None, real_groups=None):
    """Sum over layers of the drifting loss in feature space.

    Queries are the attached generated features; positives are the real
    features and negatives a detached copy of the generated ones. With group
    labels the field is computed per condition. Returns ``(loss, {layer: value})``.
    """
    if set(real_feats) != set(gen_feats):
        raise ContractError(f"layer keys differ: {sorted(real_feats)} vs {sorted(gen_feats)}")
    total = None
    breakdown = {}
    for layer in sorted(gen_feats):
        z = nx.tensor(gen_feats[layer])
        r = _values(real_feats[layer])
        targets = grouped_targets(z.data, r, cfg, gen_groups, real_groups)
        part = drift_loss(z, nx.constant(targets))
        breakdown[layer] = part.item()
        total = part if total is None else total + part
    return total, breakdown
