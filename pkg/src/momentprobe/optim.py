"""Decoupled-weight-decay adaptive optimizer and its learning-rate
schedule: linear warmup followed by cosine annealing, with an optional
linear batch-size scaling rule for the base rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Value


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    lr_base: float
    lr_min: float = 1e-6

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}")
        if self.lr_min > self.lr_base:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_base {self.lr_base}")


def lr_at(step: int, s: Schedule) -> float:
    """Linear ramp 0 -> lr_base over the warmup, then cosine decay to
    lr_min at total_steps. Boundary values are exact."""
    if not (0 <= step <= s.total_steps):
        raise UsageError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_base * step / s.warmup_steps
    if step == s.warmup_steps:
        return s.lr_base
    if step == s.total_steps:
        return s.lr_min
    t = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.lr_min + 0.5 * (s.lr_base - s.lr_min) * (1.0 + math.cos(math.pi * t))


def linear_scale_lr(lr_ref: float, batch: int, batch_ref: int) -> float:
    if batch_ref <= 0:
        raise ConfigError(f"reference batch must be positive, got {batch_ref}")
    return lr_ref * batch / batch_ref


class AdamW:
    """Adam with bias correction and decoupled multiplicative weight
    decay. Only the registered trainable set ever gets state or updates;
    registering a frozen Value is rejected outright."""

    def __init__(self, params: Sequence[Value], lr_base: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        params = list(params)
        for p in params:
            if not p.requires_grad:
                raise UsageError("cannot register a frozen (requires_grad=False) parameter")
        if len({id(p) for p in params}) != len(params):
            raise UsageError("duplicate parameter registered")
        self.params = params
        self.lr_base = lr_base
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        """One update from the currently accumulated gradients."""
        if lr is None:
            lr = self.lr_base
        for p in self.params:
            if p.grad is None:
                raise UsageError("parameter has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
