"""Decoupled weight-decay AdamW on named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWState", "init_adamw", "adamw_step"]


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus shared hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adamw(params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> AdamWState:
    state = AdamWState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: AdamWState, lr: float) -> None:
    """Apply one bias-corrected AdamW update in place.

    `grads` may be None, in which case each parameter's `.grad` is used.
    Any non-finite gradient rejects the whole step before any parameter
    is touched.
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be > 0, got {lr}")
    resolved: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ValueError(f"adamw_step: missing gradient for parameter {name!r}")
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adamw_step: non-finite gradient for parameter {name!r}")
        resolved[name] = g

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = resolved[name]
        dt = p.data.dtype.type
        if state.weight_decay:
            p.data *= dt(1.0 - lr * state.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * g * g
        m_hat = m / dt(bias1)
        v_hat = v / dt(bias2)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
