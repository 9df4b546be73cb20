"""AdamW with linear warm-up + cosine decay and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor.nn import Parameter


@dataclass(frozen=True)
class WarmupCosine:
    base_lr: float
    total_steps: int
    warmup_steps: int
    warmup_factor: float = 0.1

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.base_lr * (self.warmup_factor + (1.0 - self.warmup_factor) * frac)
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """Decoupled weight decay; per-parameter learning-rate multipliers.

    Weight decay applies to parameters with two or more dimensions only.
    """

    def __init__(self, named_params: list[tuple[str, Parameter]], weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_mult: dict[str, float] | None = None):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_mult = [1.0 if lr_mult is None else lr_mult.get(n, 1.0) for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, frozen: set[str] | None = None) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None or (frozen and self.names[i] in frozen):
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            step_lr = lr * self.lr_mult[i]
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data * (1.0 - step_lr * self.weight_decay)
            p.data = p.data - step_lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": dict(zip(self.names, self.m)), "v": dict(zip(self.names, self.v))}

    def load_state(self, st: dict) -> None:
        self.t = int(st["t"])
        self.m = [np.array(st["m"][n], dtype=np.float64) for n in self.names]
        self.v = [np.array(st["v"][n], dtype=np.float64) for n in self.names]


def exp_anneal(start: float, end: float, step: int, total: int) -> float:
    """Exponential interpolation from ``start`` (step 0) to ``end`` (last step)."""
    if total <= 1:
        return end
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return start * (end / start) ** frac
