"""AdamW with a weight-decay mask, and the warmup-cosine / warmup-multistep schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

NO_DECAY_SUFFIXES = ("bias", "token")


def decays(name: str, param) -> bool:
    """Weight decay applies to matrices and kernels; never to norms, biases or tokens."""
    return param.ndim > 1 and not name.endswith(NO_DECAY_SUFFIXES)


class AdamW:
    """Decoupled weight decay: ``p -= lr*wd*p`` then the bias-corrected Adam step."""

    def __init__(self, named_params, betas=(0.9, 0.999), weight_decay: float = 0.05, eps: float = 1e-8):
        self.names, self.params = [], []
        for name, p in named_params:
            self.names.append(name)
            self.params.append(p)
        self.betas = tuple(float(b) for b in betas)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.decay_mask = [decays(n, p) for n, p in zip(self.names, self.params)]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        lr = float(lr)
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay_mask):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "betas": list(self.betas), "weight_decay": self.weight_decay}


@dataclass(frozen=True)
class ScheduleSpec:
    """Steps are 0-based optimizer-step indices; milestones are steps where lr drops by ``gamma``."""

    kind: str
    warmup: int
    total: int
    milestones: tuple = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "warmup-multistep"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.warmup < 0 or self.total <= 0 or self.warmup >= self.total:
            raise ParameterError(f"need 0 <= warmup < total, got warmup={self.warmup} total={self.total}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ParameterError(f"milestones must be strictly increasing, got {ms}")


def lr_at(schedule: ScheduleSpec, step: int, base_lr: float) -> float:
    if step < 0 or step > schedule.total:
        raise ParameterError(f"step {step} outside [0, {schedule.total}]")
    if schedule.kind == "warmup-cosine":
        if step < schedule.warmup:
            return base_lr * step / schedule.warmup
        frac = (step - schedule.warmup) / (schedule.total - schedule.warmup)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    factor = schedule.gamma ** sum(step >= m for m in schedule.milestones)
    warm = step / schedule.warmup if step < schedule.warmup else 1.0
    return base_lr * factor * warm
