from __future__ import annotations

import numpy as np

from .numerics import Tensor


def global_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class AdamW:
    """Adam with decoupled weight decay and linear warmup to a constant rate."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, warmup_steps: int = 0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.t + 1) / self.warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update

    def state_arrays(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.m + self.v])

    def load_state_arrays(self, flat: np.ndarray, t: int) -> None:
        offset = 0
        for store in (self.m, self.v):
            for i, a in enumerate(store):
                store[i] = flat[offset:offset + a.size].reshape(a.shape).copy()
                offset += a.size
        self.t = int(t)
