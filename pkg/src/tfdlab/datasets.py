"""Synthetic reference distributions with optional class labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .numerics import ContractError, Tensor

FAMILIES = ("gaussian_mixture_ring", "two_moons", "checkerboard")


class UnsupportedError(NotImplementedError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "gaussian_mixture_ring"
    dimension: int = 2
    num_classes: int = 8
    radius: float = 1.0
    std: float = 0.05
    moon_noise: float = 0.05
    grid_extent: float = 2.0
    grid_cells: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown dataset family {self.family!r}; expected one of {FAMILIES}")
        if self.dimension < 1:
            raise ContractError("dimension must be >= 1")
        if self.num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        if self.family != "gaussian_mixture_ring" and self.num_classes != 1:
            raise ContractError(f"{self.family} is unconditional; num_classes must be 1")
        if self.family in ("two_moons", "checkerboard") and self.dimension != 2:
            raise ContractError(f"{self.family} is defined in 2 dimensions only")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledBatch:
    points: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def select(self, label: int) -> np.ndarray:
        return self.points.data[self.labels == label]


def ring_means(spec: SyntheticSpec) -> np.ndarray:
    """Component means at angles 2*pi*k/K on the circle, padded with zeros for d > 2."""
    k = np.arange(spec.num_classes)
    angle = 2.0 * np.pi * k / spec.num_classes
    means = np.zeros((spec.num_classes, spec.dimension))
    means[:, 0] = spec.radius * np.cos(angle)
    if spec.dimension > 1:
        means[:, 1] = spec.radius * np.sin(angle)
    return means


def sample_batch(spec: SyntheticSpec, n: int, seed: np.random.Generator,
                 class_filter: int | None = None) -> LabeledBatch:
    if n < 1:
        raise ContractError("n must be >= 1")
    if class_filter is not None and not 0 <= class_filter < spec.num_classes:
        raise ContractError(f"class_filter {class_filter} out of range [0, {spec.num_classes})")
    rng = seed

    if spec.family == "gaussian_mixture_ring":
        if class_filter is None:
            labels = rng.integers(0, spec.num_classes, size=n)
        else:
            labels = np.full(n, class_filter, dtype=np.int64)
        points = ring_means(spec)[labels] + spec.std * rng.standard_normal((n, spec.dimension))
    elif spec.family == "two_moons":
        upper = rng.random(n) < 0.5
        t = np.pi * rng.random(n)
        points = np.where(
            upper[:, None],
            np.stack([np.cos(t), np.sin(t)], axis=1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        )
        if spec.moon_noise > 0:
            points = points + spec.moon_noise * rng.standard_normal((n, 2))
        labels = np.zeros(n, dtype=np.int64)
    else:
        cells = spec.grid_cells
        width = 2.0 * spec.grid_extent / cells
        # pick a black cell uniformly, then a uniform point inside it
        black = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
        idx = rng.integers(0, len(black), size=n)
        ij = np.array(black)[idx]
        points = -spec.grid_extent + (ij + rng.random((n, 2))) * width
        labels = np.zeros(n, dtype=np.int64)

    return LabeledBatch(Tensor(points), np.asarray(labels, dtype=np.int64))


def mixture_log_density(spec: SyntheticSpec, x) -> np.ndarray | float:
    """Exact log density of the equal-weight ring mixture at one point or a batch."""
    if spec.family != "gaussian_mixture_ring":
        raise UnsupportedError(f"log density is only available for gaussian_mixture_ring, not {spec.family}")
    pts = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = spec.dimension
    sq = ((pts[:, None, :] - ring_means(spec)[None]) ** 2).sum(axis=2)
    comp = -0.5 * sq / spec.std**2 - d * np.log(spec.std) - 0.5 * d * np.log(2 * np.pi)
    out = logsumexp(comp, axis=1) - np.log(spec.num_classes)
    return float(out[0]) if single else out
