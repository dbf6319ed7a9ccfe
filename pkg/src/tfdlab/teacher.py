"""Frozen toy diffusion teacher and noised hidden-state features."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointFormatError, read_checkpoint, write_checkpoint
from .datasets import SyntheticSpec, sample_batch
from .networks import DenoiserNet
from .numerics import ContractError, DivergenceError, Tensor
from .optim import AdamW


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 2.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ContractError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Log-uniform noise levels."""
        lo, hi = np.log(self.sigma_min), np.log(self.sigma_max)
        return np.exp(rng.uniform(lo, hi, size=n))

    def grid(self, steps: int) -> np.ndarray:
        """Geometric grid from sigma_max down to sigma_min (``steps`` levels)."""
        return np.geomspace(self.sigma_max, self.sigma_min, steps)


@dataclass(frozen=True)
class FeatureSpec:
    layers: tuple = (2, 3, 4)
    sigma_tf: float = 0.1
    pool_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not self.layers:
            raise ContractError("feature layer set must be nonempty")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ContractError(f"feature layers must be strictly increasing, got {self.layers}")
        if self.sigma_tf < 0:
            raise ContractError("sigma_tf must be >= 0")
        if self.pool_size < 1:
            raise ContractError("pool_size must be >= 1")

    def validate(self, net: DenoiserNet) -> None:
        for l in self.layers:
            if not 1 <= l <= net.num_layers:
                raise ContractError(f"layer {l} outside [1, {net.num_layers}]")
            if net.widths[l - 1] % self.pool_size:
                raise ContractError(f"pool size {self.pool_size} does not divide width {net.widths[l - 1]} of layer {l}")


def spec_hash(spec: SyntheticSpec) -> str:
    raw = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


def train_teacher(spec: SyntheticSpec, net: DenoiserNet, schedule: NoiseSchedule, steps: int,
                  lr: float, seed: np.random.Generator, batch_size: int = 256):
    """Fit ``net`` to predict x from x + sigma * noise; returns the frozen net and the loss trace."""
    if steps < 0:
        raise ContractError("steps must be >= 0")
    rng = seed
    opt = AdamW(net.parameters(), lr=lr)
    trace = []
    for step in range(steps):
        batch = sample_batch(spec, batch_size, rng)
        sigma = schedule.sample(rng, batch_size)
        x = batch.points.data
        noisy = x + sigma[:, None] * rng.standard_normal(x.shape)
        pred = net(Tensor(noisy), sigma, batch.labels)
        loss = nx.mean(nx.square(pred - Tensor(x)))
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError("teacher loss is not finite", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(value)
    return net.freeze(), trace


def average_pool(v, pool: int) -> Tensor:
    """Mean over contiguous groups of ``pool`` columns."""
    v = nx.tensor(v)
    n, w = v.shape
    if pool < 1 or w % pool:
        raise ContractError(f"pool size {pool} does not divide width {w}")
    if pool == 1:
        return v
    return nx.mean(nx.reshape(v, (n, w // pool, pool)), axis=2)


def normalize_rows(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / (nx.l2_norm(v, axis=1, keepdims=True) + eps)


def feature_sigma(teacher: DenoiserNet, sigma_tf: float, sigma_floor: float) -> float:
    # the noise embedding needs log(sigma); clean features reuse the smallest trained level
    return max(sigma_tf, sigma_floor)


def extract_features(teacher: DenoiserNet, x, labels, fs: FeatureSpec, seed: np.random.Generator,
                     sigma_floor: float = 0.01) -> dict[int, Tensor]:
    """Pooled, unit-normalized hidden states of the noised input for each layer in ``fs``.

    Gradients flow to ``x``; ``sigma_floor`` is the conditioning level used when
    ``fs.sigma_tf`` is below it (normally the teacher's sigma_min).
    """
    fs.validate(teacher)
    x = nx.tensor(x)
    xi = seed.standard_normal(x.shape)
    noised = x + Tensor(fs.sigma_tf * xi) if fs.sigma_tf > 0 else x
    cond = feature_sigma(teacher, fs.sigma_tf, sigma_floor)
    _, hidden = teacher.forward(noised, cond, labels, upto=max(fs.layers))
    return {l: normalize_rows(average_pool(hidden[l], fs.pool_size)) for l in fs.layers}


def sample_teacher(teacher: DenoiserNet, labels, schedule: NoiseSchedule, seed: np.random.Generator,
                   steps: int = 20) -> np.ndarray:
    """Deterministic multi-step sampling: predict x0, move to the next lower sigma along the same direction."""
    labels = np.asarray(labels, dtype=np.intp)
    sigmas = schedule.grid(steps)
    x = sigmas[0] * seed.standard_normal((len(labels), teacher.dim))
    x0 = x
    for i, s in enumerate(sigmas):
        x0 = teacher.denoise(x, s, labels)
        if not np.all(np.isfinite(x0)):
            raise DivergenceError("teacher sampling produced non-finite values", i)
        if i + 1 < len(sigmas):
            x = x0 + (sigmas[i + 1] / s) * (x - x0)
    return x0


def save_teacher(path, teacher: DenoiserNet, schedule: NoiseSchedule, spec: SyntheticSpec, **extra) -> None:
    header = {"kind": "teacher", "architecture": teacher.architecture(),
              "sigma_min": schedule.sigma_min, "sigma_max": schedule.sigma_max,
              "spec_hash": spec_hash(spec), **extra}
    write_checkpoint(path, teacher.flat_parameters(), header)


def load_teacher(path, expect_spec: SyntheticSpec | None = None):
    flat, header = read_checkpoint(path)
    if header.get("kind") != "teacher":
        raise CheckpointFormatError(f"{path}: not a teacher checkpoint (kind={header.get('kind')!r})")
    if expect_spec is not None and header.get("spec_hash") != spec_hash(expect_spec):
        raise CheckpointFormatError(f"{path}: dataset hash {header.get('spec_hash')} does not match config {spec_hash(expect_spec)}")
    net = DenoiserNet(**header["architecture"])
    net.load_flat(flat)
    net.freeze()
    return net, NoiseSchedule(header["sigma_min"], header["sigma_max"]), header
