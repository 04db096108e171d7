from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class OptimizerState:
    """Adam moments plus the epoch-level learning-rate schedule."""

    base_lr: float = 8e-6
    warmup_epochs: int = 5
    decay: float = 0.97
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(epoch: int, state: OptimizerState) -> float:
    """Linear warm-up to ``base_lr`` over ``warmup_epochs``, then ``decay`` per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < state.warmup_epochs:
        return state.base_lr * (epoch + 1) / state.warmup_epochs
    return state.base_lr * state.decay ** (epoch - state.warmup_epochs)


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return params
