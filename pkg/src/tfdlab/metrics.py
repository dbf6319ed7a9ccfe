"""Desk-scale sample-quality, coverage and diversity metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import SyntheticSpec, ring_means
from .numerics import ContractError, NumericError, Tensor


def _values(t) -> np.ndarray:
    return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


@dataclass
class MetricRecord:
    step: int
    name: str
    value: float
    budget_best: float


@dataclass
class CoverageSummary:
    modes_hit: int
    high_quality_fraction: float
    max_pairwise_similarity: float
    counts: list


def _sqrt_trace_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    # tr((A B)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}), the inner matrix is symmetric PSD
    w, v = np.linalg.eigh(cov_a)
    if w.min() < -1e-9 * max(1.0, w.max()):
        raise NumericError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    root_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root_a @ cov_b @ root_a
    lam = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if lam.min() < -1e-9 * max(1.0, lam.max()):
        raise NumericError(f"covariance product is not PSD (min eigenvalue {lam.min():.3e})")
    return float(np.sqrt(np.clip(lam, 0.0, None)).sum())


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, jitter: float = 1e-9) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    cov_a = np.atleast_2d(cov_a).astype(float) + jitter * np.eye(len(mu_a))
    cov_b = np.atleast_2d(cov_b).astype(float) + jitter * np.eye(len(mu_b))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _sqrt_trace_product(cov_a, cov_b))


def gaussian_frechet(samples_a, samples_b) -> float:
    """Fréchet distance between Gaussians fitted to the two sample sets."""
    a, b = _values(samples_a), _values(samples_b)
    d = a.shape[1]
    if len(a) <= d or len(b) <= d:
        raise ContractError(f"need more than {d} samples per set, got {len(a)} and {len(b)}")
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def mmd_squared(a, b, bandwidths=(0.1, 0.5, 1.0)) -> float:
    """Biased (V-statistic) squared MMD with a sum of Gaussian kernels."""
    a, b = np.atleast_2d(_values(a)), np.atleast_2d(_values(b))
    if len(a) == 0 or len(b) == 0:
        raise ContractError("mmd needs nonempty sets")

    def k(x, y):
        sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        return sum(np.exp(-sq / (2.0 * bw * bw)) for bw in bandwidths)

    return float(k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean())


def max_pairwise_similarity(features, labels=None, group_size: int | None = 8) -> float:
    """Largest ``exp(-||z_i - z_j||)`` within a group, averaged over label groups.

    Each label contributes its first ``group_size`` rows (all rows when None).
    """
    z = _values(features)
    labels = np.zeros(len(z), dtype=int) if labels is None else np.asarray(labels)
    scores = []
    for c in np.unique(labels):
        g = z[labels == c]
        if group_size is not None:
            g = g[:group_size]
        if len(g) < 2:
            continue
        diff = g[:, None, :] - g[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=2))[np.triu_indices(len(g), k=1)]
        scores.append(float(np.exp(-d.min())))
    return float(np.mean(scores)) if scores else float("nan")


def mode_coverage(samples, spec: SyntheticSpec, radius_mult: float = 3.0, features=None,
                  labels=None, group_size: int | None = 8) -> CoverageSummary:
    """Count ring components that received a sufficient share of nearby samples.

    A component is hit when at least ``max(1, 0.01 * n)`` samples lie within
    ``radius_mult * std`` of its mean. The similarity statistic uses
    ``features`` when given, otherwise the samples themselves.
    """
    if spec.family != "gaussian_mixture_ring":
        raise ContractError("mode coverage is defined for gaussian_mixture_ring only")
    x = _values(samples)
    n = len(x)
    means = ring_means(spec)
    d = np.sqrt(((x[:, None, :] - means[None]) ** 2).sum(axis=2))
    nearest = d.argmin(axis=1)
    close = d[np.arange(n), nearest] <= radius_mult * spec.std
    counts = np.bincount(nearest[close], minlength=spec.num_classes)
    need = max(1.0, 0.01 * n)
    sim = max_pairwise_similarity(x if features is None else features, labels, group_size)
    return CoverageSummary(int((counts >= need).sum()), float(close.mean()), sim, counts.tolist())


def budgeted_best(trace, budgets) -> dict:
    """Minimum value observed at or before each budget (NaN when nothing was logged yet)."""
    if not trace:
        raise ContractError("budgeted_best needs a nonempty trace")
    steps = np.array([r.step if isinstance(r, MetricRecord) else r[0] for r in trace])
    values = np.array([r.value if isinstance(r, MetricRecord) else r[1] for r in trace], dtype=float)
    if np.any(np.diff(steps) < 0):
        raise ContractError("trace must be sorted by step")
    out = {}
    for b in budgets:
        mask = steps <= b
        out[b] = float(values[mask].min()) if mask.any() else float("nan")
    return out


def with_budget_best(rows) -> list[MetricRecord]:
    """Attach the running minimum per metric name to ``(step, name, value)`` rows."""
    best: dict[str, float] = {}
    out = []
    for step, name, value in rows:
        best[name] = min(best.get(name, np.inf), value)
        out.append(MetricRecord(int(step), name, float(value), best[name]))
    return out


class MetricsFile:
    """Append-only ``step,name,value`` CSV."""

    header = ("step", "name", "value")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, step: int, name: str, value: float) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow((int(step), name, repr(float(value))))

    def extend(self, rows) -> None:
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for step, name, value in rows:
                w.writerow((int(step), name, repr(float(value))))

    def truncate_after(self, step: int) -> None:
        """Drop rows logged after ``step`` (used when resuming)."""
        rows = [r for r in read_metrics(self.path) if r[0] <= step]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for s, name, value in rows:
                w.writerow((s, name, repr(value)))


def read_metrics(path, name: str | None = None) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if tuple(head or ()) != MetricsFile.header:
            raise ContractError(f"{path}: expected header step,name,value")
        rows = [(int(s), n, float(v)) for s, n, v in reader]
    return rows if name is None else [r for r in rows if r[1] == name]
