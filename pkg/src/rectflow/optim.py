"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tensor


@dataclass
class AdamState:
    """Bias-corrected Adam moments keyed by parameter name.

    The step count increases by exactly one per applied update; a rejected
    update (non-finite gradient) leaves both moments and count untouched.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def adam_step(params: dict[str, Tensor], state: AdamState):
    """Apply one in-place Adam update. Missing gradients count as zero.

    Validates every gradient before touching any parameter so a non-finite
    gradient rejects the whole step.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'; step not applied")
        grads[name] = g

    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter '{name}'")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
