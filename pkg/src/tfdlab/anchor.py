"""Anchor-margin coverage regularizer in teacher feature space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass
class AnchorBank:
    anchors: dict          # layer -> (M, dim) array, detached
    bandwidth: dict        # layer -> h
    alpha: float = 0.5
    labels: np.ndarray | None = None   # condition of each anchor row, when grouped

    def __post_init__(self):
        for layer, a in self.anchors.items():
            if len(a) < 2:
                raise ContractError(f"layer {layer}: need at least 2 anchors, got {len(a)}")
            if self.bandwidth[layer] <= 0:
                raise ContractError(f"layer {layer}: bandwidth must be positive")
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")

    @property
    def layers(self) -> list:
        return sorted(self.anchors)


@dataclass
class SupportReport:
    generated_support: np.ndarray
    self_support: np.ndarray
    thresholds: np.ndarray
    violations: int


def _values(t) -> np.ndarray:
    return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


def generated_support(anchors, generated, h: float, normalizer: str = "M") -> Tensor:
    """Kernel density of generated points at each anchor.

    ``normalizer="M"`` divides the sum over generated points by the number of
    anchors; ``"N"`` divides by the number of generated points.
    """
    if h <= 0:
        raise ContractError("bandwidth h must be positive")
    a = nx.constant(_values(anchors))
    z = nx.tensor(generated)
    denom = {"M": a.shape[0], "N": z.shape[0]}.get(normalizer)
    if denom is None:
        raise ContractError(f"normalizer must be 'M' or 'N', got {normalizer!r}")
    k = nx.exp(nx.scale(nx.pairwise_distance(a, z), -1.0 / h))
    return nx.scale(nx.sum(k, axis=1), 1.0 / denom)


def self_support(anchors, h: float) -> np.ndarray:
    a = _values(anchors)
    m = len(a)
    if m < 2:
        raise ContractError(f"self-support needs at least 2 anchors, got {m}")
    if h <= 0:
        raise ContractError("bandwidth h must be positive")
    diff = a[:, None, :] - a[None, :, :]
    k = np.exp(-np.sqrt((diff * diff).sum(axis=2)) / (2.0 * h))
    np.fill_diagonal(k, 0.0)
    return k.sum(axis=1) / (m - 1)


def anchor_margin_loss(anchors, generated, h: float, alpha: float, normalizer: str = "M"):
    """Mean hinge ``max(0, alpha * self_support - generated_support)`` over anchors."""
    s = generated_support(anchors, generated, h, normalizer)
    sbar = self_support(anchors, h)
    rho = alpha * sbar
    loss = nx.mean(nx.relu(nx.constant(rho) - s))
    report = SupportReport(s.data.copy(), sbar, rho, int((s.data < rho).sum()))
    return loss, report


def median_bandwidth(anchors, temperature: float = 1.0, groups=None) -> float:
    """``temperature`` times the median pairwise distance between anchors.

    With ``groups`` only pairs sharing a group label are counted.
    """
    a = _values(anchors)
    diff = a[:, None, :] - a[None, :, :]
    iu = np.triu_indices(len(a), k=1)
    d = np.sqrt((diff * diff).sum(axis=2))[iu]
    if groups is not None:
        groups = np.asarray(groups)
        d = d[groups[iu[0]] == groups[iu[1]]]
        if d.size == 0:
            raise ContractError("no anchor pairs share a group")
    h = float(np.median(d)) * temperature
    if not h > 0:
        raise ContractError("anchors coincide; median bandwidth is zero")
    return h


def build_anchor_bank(real_feats: dict, M: int, seed: np.random.Generator, bandwidth=None,
                      alpha: float = 0.5, temperature: float = 1.0, groups=None) -> AnchorBank:
    """Uniform subsample of ``M`` real features per layer, without replacement.

    ``bandwidth`` may be a float, a per-layer dict, or None for the median
    heuristic (within-group pairs only when ``groups`` labels the features).
    The same rows are kept in every layer.
    """
    anchors, hs = {}, {}
    sizes = {len(_values(f)) for f in real_feats.values()}
    if len(sizes) != 1:
        raise ContractError("all layers must hold the same number of features")
    n = sizes.pop()
    if M > n:
        raise ContractError(f"asked for {M} anchors but only {n} features available")
    idx = np.sort(seed.choice(n, size=M, replace=False))
    sub_groups = None if groups is None else np.asarray(groups)[idx]
    for layer in sorted(real_feats):
        anchors[layer] = _values(real_feats[layer])[idx].copy()
        if bandwidth is None:
            hs[layer] = median_bandwidth(anchors[layer], temperature, sub_groups)
        elif isinstance(bandwidth, dict):
            hs[layer] = float(bandwidth[layer])
        else:
            hs[layer] = float(bandwidth)
    return AnchorBank(anchors, hs, alpha, sub_groups)
