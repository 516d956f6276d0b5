"""Adam optimizer over a ParamSet."""

from __future__ import annotations

import numpy as np

from .params import ParamSet


class AdamState:
    """Per-parameter first/second moment accumulators plus step count."""

    def __init__(self, params: ParamSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(state: AdamState, params: ParamSet) -> ParamSet:
    """Apply one Adam update from the accumulated gradients, then clear them."""
    for name, t in params.items():
        if not np.isfinite(t.grad).all():
            raise ValueError(f"non-finite gradient in parameter {name!r}")

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step_count
    bias2 = 1.0 - b2 ** state.step_count
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    params.zero_grad()
    return params
