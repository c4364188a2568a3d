"""AdamW with decoupled weight decay, and the warmup + half-cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bmfl.errors import ConfigError, DimensionError, StepRangeError


def _values(p) -> np.ndarray:
    # Tensors expose their array as .data; a bare ndarray's .data is a memoryview
    return p if isinstance(p, np.ndarray) else p.data


@dataclass
class OptimizerState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02

    @classmethod
    def for_params(cls, params, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.m = [np.zeros_like(_values(p)) for p in params]
        state.v = [np.zeros_like(_values(p)) for p in params]
        return state


def adamw_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One in-place AdamW update of ``params`` (Tensors or arrays).

    Weight decay is decoupled: ``w <- w - lr*wd*w - lr*m_hat/(sqrt(v_hat)+eps)``.
    A ``None`` gradient is treated as zero.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        w = _values(p)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape or state.m[i].shape != w.shape:
            raise DimensionError(f"adamw_step: param {w.shape}, grad {g.shape}, moment {state.m[i].shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        w *= 1.0 - lr * state.weight_decay
        w -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)


class AdamW:
    """Convenience wrapper binding a parameter list to its optimizer state."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.02):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState.for_params(
            self.params, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay
        )

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 5e-5
    warmup_steps: int = 1
    total_steps: int = 1
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 1 or self.total_steps < self.warmup_steps:
            raise ConfigError(
                f"need 1 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.floor_lr < 0 or self.peak_lr < self.floor_lr:
            raise ConfigError(f"need 0 <= floor_lr <= peak_lr, got {self.floor_lr}, {self.peak_lr}")

    @classmethod
    def from_epochs(cls, steps_per_epoch: int, epochs: int, warmup_epochs: float = 1.5,
                    peak_lr: float = 5e-5, floor_lr: float = 0.0) -> "LrSchedule":
        total = max(1, steps_per_epoch * epochs)
        warmup = min(total, max(1, round(warmup_epochs * steps_per_epoch)))
        return cls(peak_lr=peak_lr, warmup_steps=warmup, total_steps=total, floor_lr=floor_lr)


def lr_at(step: int, sched: LrSchedule) -> float:
    if step < 0 or step > sched.total_steps:
        raise StepRangeError(f"step {step} outside [0, {sched.total_steps}]")
    w, total = sched.warmup_steps, sched.total_steps
    if step <= w:
        return sched.peak_lr * (max(step, 1) / w)
    progress = (step - w) / (total - w)
    return sched.floor_lr + (sched.peak_lr - sched.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
