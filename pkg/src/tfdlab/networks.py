"""Noise- and class-conditioned MLP shared by the teacher and the student."""
from __future__ import annotations

import hashlib

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


def noise_embedding(sigma, dim: int) -> np.ndarray:
    """Sinusoidal features of log(sigma); returns shape (n, dim)."""
    if dim % 2:
        raise ContractError("embed_dim must be even")
    c = 0.25 * np.log(np.atleast_1d(np.asarray(sigma, dtype=np.float64)))
    freqs = 2.0 ** np.arange(dim // 2) * (np.pi / 2.0)
    arg = c[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class DenoiserNet:
    """Predicts a clean sample from a noised one.

    ``hidden[l]`` (1-based) is the post-activation output of fully connected
    layer ``l``. Layer 1 consumes the sum of the sample projection, the noise
    embedding projection and a learned class vector.
    """

    def __init__(self, dim: int, num_classes: int, widths, embed_dim: int = 16,
                 rng: np.random.Generator | None = None):
        self.dim = int(dim)
        self.num_classes = int(num_classes)
        self.widths = [int(w) for w in widths]
        self.embed_dim = int(embed_dim)
        if not self.widths:
            raise ContractError("need at least one hidden layer")
        self.frozen = False
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        w1 = self.widths[0]
        self._init("in_x", rng.standard_normal((self.dim, w1)) / np.sqrt(self.dim))
        self._init("in_sigma", rng.standard_normal((self.embed_dim, w1)) / np.sqrt(self.embed_dim))
        self._init("class_table", 0.5 * rng.standard_normal((self.num_classes, w1)))
        self._init("b1", np.zeros(w1))
        for l in range(2, len(self.widths) + 1):
            fan_in = self.widths[l - 2]
            self._init(f"W{l}", rng.standard_normal((fan_in, self.widths[l - 1])) / np.sqrt(fan_in))
            self._init(f"b{l}", np.zeros(self.widths[l - 1]))
        self._init("W_out", 0.1 * rng.standard_normal((self.widths[-1], self.dim)) / np.sqrt(self.widths[-1]))
        self._init("b_out", np.zeros(self.dim))

    def _init(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    @property
    def num_layers(self) -> int:
        return len(self.widths)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x, sigma, labels, upto: int | None = None):
        """Run the net; returns ``(output, hidden)``.

        With ``upto`` set, stops after hidden layer ``upto`` and returns ``None``
        as output.
        """
        x = nx.tensor(x)
        n = x.shape[0]
        if x.data.ndim != 2 or x.shape[1] != self.dim:
            raise nx.DimensionError(f"expected input of shape (n, {self.dim}), got {x.shape}")
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape != (n,):
            raise nx.DimensionError(f"expected {n} labels, got shape {labels.shape}")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        emb = Tensor(noise_embedding(sig, self.embed_dim))
        p = self.params
        pre = x @ p["in_x"] + emb @ p["in_sigma"] + nx.take_rows(p["class_table"], labels) + p["b1"]
        h = nx.silu(pre)
        hidden = {1: h}
        last = self.num_layers if upto is None else upto
        for l in range(2, last + 1):
            h = nx.silu(h @ p[f"W{l}"] + p[f"b{l}"])
            hidden[l] = h
        if upto is not None:
            return None, hidden
        return h @ p["W_out"] + p["b_out"], hidden

    def __call__(self, x, sigma, labels) -> Tensor:
        return self.forward(x, sigma, labels)[0]

    def denoise(self, x, sigma, labels) -> np.ndarray:
        return self.forward(nx.constant(x), sigma, labels)[0].data

    def freeze(self) -> "DenoiserNet":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def architecture(self) -> dict:
        return {"dim": self.dim, "num_classes": self.num_classes,
                "widths": list(self.widths), "embed_dim": self.embed_dim}

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(t.data.size for t in self.params.values())
        if flat.size != total:
            raise ContractError(f"expected {total} parameters, got {flat.size}")
        offset = 0
        for name, t in self.params.items():
            k = t.data.size
            self.params[name] = Tensor(flat[offset:offset + k].reshape(t.shape), requires_grad=not self.frozen)
            offset += k

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "DenoiserNet":
        clone = DenoiserNet.__new__(DenoiserNet)
        clone.dim, clone.num_classes = self.dim, self.num_classes
        clone.widths, clone.embed_dim = list(self.widths), self.embed_dim
        clone.frozen = False
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return clone
