"""SGD with momentum and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # keyed by id() of the parameter tensor
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: Sequence[Tensor], state: SgdState) -> None:
    """v <- mu*v + g ; theta <- theta - lr*(v + wd*theta), then clear grads.

    Only the given parameters move; velocities of parameters left out of a
    step are kept as they are.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradientError(f"parameter {i} has no gradient")
    for p in params:
        v = state.velocity.get(id(p))
        if v is None:
            v = state.velocity[id(p)] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError("velocity buffer does not match its parameter")
        dt = p.data.dtype.type
        lr, mu, wd = dt(state.learning_rate), dt(state.momentum), dt(state.weight_decay)
        v *= mu
        v += p.grad
        if wd:
            p.data -= lr * (v + wd * p.data)
        else:
            p.data -= lr * v
        p.grad = None


@dataclass(frozen=True)
class StepLrSchedule:
    base_lr: float = 0.01
    milestones: tuple = (0.6, 0.8)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 0:
            raise ValueError("base_lr and decay_factor must be positive")
        ms = tuple(self.milestones)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")


def lr_at(schedule: StepLrSchedule, epoch: int, total_epochs: int) -> float:
    passed = sum(1 for m in schedule.milestones if epoch >= m * total_epochs - 1e-9)
    return schedule.base_lr * schedule.decay_factor**passed
