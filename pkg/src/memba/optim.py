"""Adam with decoupled weight decay, global-norm clipping and warmup+cosine."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter


def lr_at(step: int, total: int, base_lr: float, warmup_frac: float = 0.1, schedule: str = "cosine") -> float:
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base_lr * (step + 1) / warm
    if schedule == "constant":
        return base_lr
    progress = (step - warm) / max(1, total - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.value.grad = p.grad * f
    return norm


class AdamW:
    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = [p for p in params if p.trainable]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            w = p.value.data
            if self.wd and w.ndim >= 2:
                w -= lr * self.wd * w
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
