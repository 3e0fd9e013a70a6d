"""Adam with per-group learning rates and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .nn import Parameter


@dataclass
class ParamGroup:
    name: str
    base_lr: float
    params: dict[str, Parameter]

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"group {self.name!r}: base_lr must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class Adam:
    """Adam where weight decay is added to the update rather than to the gradient:

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """

    def __init__(self, groups: list[ParamGroup], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-6):
        names = [n for g in groups for n in g.params]
        if len(names) != len(set(names)):
            raise ConfigError("parameter groups overlap")
        self.groups = groups
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.state = AdamState()

    def step(self, schedule_factor: float = 1.0) -> None:
        for group in self.groups:
            for name, p in group.params.items():
                if p.grad is None:
                    raise UsageError(f"parameter {name!r} has no gradient")
        self.state.t += 1
        t = self.state.t
        b1, b2 = self.beta1, self.beta2
        for group in self.groups:
            lr = schedule_factor * group.base_lr
            for name, p in group.params.items():
                g = p.grad
                m = self.state.m.get(name)
                if m is None:
                    m = self.state.m[name] = np.zeros_like(p.data)
                    self.state.v[name] = np.zeros_like(p.data)
                v = self.state.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
                p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params.values():
                p.grad = None


def adam_step(opt: Adam, schedule_factor: float) -> None:
    opt.step(schedule_factor)


@dataclass
class SchedulerConfig:
    T0: int | None = None  # None: one epoch worth of steps
    T_mult: float = 1.0
    eta_min: float = 0.0

    def __post_init__(self):
        if self.T0 is not None and self.T0 < 1:
            raise ConfigError("scheduler T0 must be >= 1")
        if self.T_mult < 1:
            raise ConfigError("scheduler T_mult must be >= 1")
        if not 0.0 <= self.eta_min <= 1.0:
            raise ConfigError("scheduler eta_min is a fraction in [0, 1]")


def cycle_position(step: float, T0: float, T_mult: float) -> tuple[int, float, float]:
    """``(cycle index, steps into cycle, cycle length)`` for a (possibly fractional) step."""
    if step < 0:
        raise UsageError("step must be non-negative")
    if T_mult == 1:
        i = int(step // T0)
        return i, step - i * T0, float(T0)
    i, start, length = 0, 0.0, float(T0)
    while step >= start + length:
        start += length
        length *= T_mult
        i += 1
    return i, step - start, length


def cosine_factor(t_cur: float, length: float, eta_min: float) -> float:
    return eta_min + (1 - eta_min) * (1 + math.cos(math.pi * t_cur / length)) / 2


def cawr_factor(step: float, cfg: SchedulerConfig) -> float:
    """Learning-rate multiplier in [eta_min, 1]; 1 at every restart."""
    if cfg.T0 is None:
        raise ConfigError("scheduler T0 unresolved; set it or derive it from the epoch length")
    _, t_cur, length = cycle_position(step, cfg.T0, cfg.T_mult)
    return cosine_factor(t_cur, length, cfg.eta_min)
