"""Adam with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Update ``params`` (Tensors) in place from matching ``grads`` arrays.

    Decay is applied as ``p -= lr * wd * p`` before the moment step, as in
    AdamW.  Returns ``params``.
    """
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch: param {p.shape}, grad {g.shape}")
    state.step += 1
    t = state.step
    lr = state.learning_rate
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
