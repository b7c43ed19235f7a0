"""Adam with L2 weight decay and a step-wise learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; update rejected")
        self.name = name


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 3e-4
    decay_factor: float = 0.8
    decay_every: int = 5000

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 0 or self.decay_every < 1:
            raise ValueError(f"invalid schedule {self}")

    def __call__(self, step: int) -> float:
        return schedule_lr(self, step)


def schedule_lr(sched: LrSchedule, step: int) -> float:
    """``base_lr * decay_factor ** (step // decay_every)``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return sched.base_lr * sched.decay_factor ** (step // sched.decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, decoupled: bool = False) -> None:
    """Apply one Adam update in place.

    By default weight decay is the coupled L2 form ``g + wd * theta`` fed
    into the moment estimates; ``decoupled=True`` instead shrinks the
    parameters directly by ``lr * wd * theta``.  Parameters without a
    gradient entry (or with ``None``) are treated as having zero gradient.

    Raises
    ------
    NonFiniteGradientError
        If any gradient is NaN/inf.  No parameter is modified in that case.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else np.asarray(g, dtype=theta.dtype)
        if weight_decay and not decoupled:
            g = g + weight_decay * theta
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay and decoupled:
            theta -= (lr * weight_decay) * theta
        theta -= (lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(theta.dtype)


def lr_trace(sched: LrSchedule, n_steps: int) -> list:
    return [schedule_lr(sched, s) for s in range(n_steps)]

