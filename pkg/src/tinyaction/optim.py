"""AdamW with decoupled weight decay, and a warmup + cosine warm-restart schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import is_bias


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 0
    cycle_steps: int = 10
    cycle_mult: int = 2
    eta_min: float = 0.0

    def validate(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.cycle_steps < 1 or self.cycle_mult < 1:
            raise ValueError("cycle_steps and cycle_mult must be >= 1")
        if int(self.cycle_steps) != self.cycle_steps or int(self.cycle_mult) != self.cycle_mult:
            raise ValueError("cycle_steps and cycle_mult must be integers")
        if not 0.0 <= self.eta_min <= self.base_lr:
            raise ValueError("eta_min must lie in [0, base_lr]")


def cycle_position(s: int, cycle_steps: int, cycle_mult: int):
    """Return ``(t_cur, t_i)`` for step ``s`` counted from the first cycle start."""
    if cycle_mult == 1:
        return s % cycle_steps, cycle_steps
    t_i = cycle_steps
    while s >= t_i:
        s -= t_i
        t_i *= cycle_mult
    return s, t_i


def lr_at(step: int, schedule: LrSchedule) -> float:
    schedule.validate()
    if step < 0:
        raise ValueError("step must be >= 0")
    W = schedule.warmup_steps
    if step < W:
        return schedule.base_lr * (step + 1) / W
    t_cur, t_i = cycle_position(step - W, schedule.cycle_steps, schedule.cycle_mult)
    if t_cur == 0:
        return schedule.base_lr
    span = schedule.base_lr - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * t_cur / t_i))


@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamWState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    def copy(self) -> "AdamWState":
        return AdamWState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()},
                          self.step, self.beta1, self.beta2, self.eps, self.weight_decay)


def adamw_step(params, grads, state: AdamWState, lr: float, decay_mask=None):
    """One AdamW update; returns new ``(params, state)`` and leaves the inputs untouched.

    ``decay_mask`` maps parameter names to whether weight decay applies; by
    default every non-bias parameter is decayed.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ValueError("params, grads and optimizer state must share the same keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {k}")
    new = state.copy()
    new.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** new.step
    bc2 = 1.0 - b2 ** new.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new.m[k], new.v[k] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        decay = (not is_bias(k)) if decay_mask is None else decay_mask[k]
        if decay and state.weight_decay:
            update = update + state.weight_decay * p
        out[k] = p - lr * update
    return out, new
