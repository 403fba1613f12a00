"""Inner AdamW, the outer optimizer family, and the inner learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .numerics import DimensionError

OUTER_KINDS = ("sgd", "sgdm", "nesterov", "adam")

# Bold (selected) outer learning rates from the hyper-parameter sweep.
DEFAULT_OUTER_LR = {"sgd": 0.5, "sgdm": 0.3, "nesterov": 0.7, "adam": 0.3}


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamWState":
        return AdamWState(self.m.copy(), self.v.copy(), self.step)


@dataclass
class MomentumState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "MomentumState":
        return cls(np.zeros(n))

    def copy(self) -> "MomentumState":
        return MomentumState(self.velocity.copy())


@dataclass(frozen=True)
class InnerHyper:
    base_lr: float = 4e-4
    warmup_steps: int = 1000
    total_steps: int = 1000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    schedule: str = "cosine"  # or "constant" (warmup, then flat)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class OuterHyper:
    kind: str = "nesterov"
    lr: float | None = None
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 0.1

    def __post_init__(self):
        if self.kind not in OUTER_KINDS:
            raise ValueError(f"unknown outer optimizer {self.kind!r}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_OUTER_LR[self.kind])
        if self.lr <= 0:
            raise ValueError("outer lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def lr_schedule(step: int, hyper: InnerHyper) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step > hyper.total_steps or step < 0:
        return 0.0
    if step < hyper.warmup_steps:
        return hyper.base_lr * step / hyper.warmup_steps
    if hyper.schedule == "constant":
        return hyper.base_lr
    span = hyper.total_steps - hyper.warmup_steps
    if span == 0:
        return hyper.base_lr
    progress = (step - hyper.warmup_steps) / span
    return hyper.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _same_len(*arrays):
    n = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != n:
            raise DimensionError(f"length mismatch: {n} vs {a.shape}")


def adamw_step(state: AdamWState, params: np.ndarray, grad: np.ndarray,
               hyper: InnerHyper, lr: float):
    """One decoupled-weight-decay Adam step. Updates ``params`` and ``state`` in place."""
    _same_len(params, grad, state.m, state.v)
    state.step += 1
    bc1 = 1.0 - hyper.beta1 ** state.step
    bc2 = 1.0 - hyper.beta2 ** state.step
    kernels.adamw_update(params, grad, state.m, state.v, lr, hyper.beta1, hyper.beta2,
                         hyper.eps, hyper.weight_decay, bc1, bc2)
    return params, state


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    _same_len(params, grad)
    params -= lr * grad
    return params


def init_outer_state(hyper: OuterHyper, n: int):
    if hyper.kind == "sgd":
        return None
    if hyper.kind == "adam":
        return AdamWState.zeros(n)
    return MomentumState.zeros(n)


def outer_step(state, theta: np.ndarray, delta: np.ndarray, hyper: OuterHyper):
    """Apply the outer optimizer, treating ``delta`` as a gradient.

    Returns ``(new_theta, state)``; ``theta`` is not modified, ``state`` is.
    Nesterov uses the look-ahead-on-the-update form
    ``v <- mu v + delta;  theta <- theta - lr (delta + mu v)``.
    """
    _same_len(theta, delta)
    lr, mu = hyper.lr, hyper.momentum
    if hyper.kind == "sgd":
        return theta - lr * delta, state
    if hyper.kind in ("sgdm", "nesterov"):
        _same_len(theta, state.velocity)
        v = state.velocity
        v[:] = mu * v + delta
        if hyper.kind == "sgdm":
            return theta - lr * v, state
        return theta - lr * (delta + mu * v), state
    # adam, no weight decay
    _same_len(theta, state.m)
    state.step += 1
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    state.m[:] = b1 * state.m + (1.0 - b1) * delta
    state.v[:] = b2 * state.v + (1.0 - b2) * delta * delta
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return theta - lr * mhat / (np.sqrt(vhat) + hyper.adam_eps), state


def with_total(hyper: InnerHyper, total_steps: int) -> InnerHyper:
    """Copy of ``hyper`` for a stage of ``total_steps``; warmup is clipped to fit."""
    return replace(hyper, total_steps=total_steps,
                   warmup_steps=min(hyper.warmup_steps, total_steps))

