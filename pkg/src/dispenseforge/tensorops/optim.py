"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.step < 0:
            raise ValueError("step must be non-negative")


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> AdamState:
    """One in-place Adam update.

    Parameters with ``requires_grad`` false, or with no gradient, are left
    untouched. Moment buffers are keyed by position in ``params``.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
        m = state.first_moment.get(i)
        v = state.second_moment.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1.0 - b1) * g).astype(DTYPE)
        v = (b2 * v + (1.0 - b2) * g * g).astype(DTYPE)
        state.first_moment[i] = m
        state.second_moment[i] = v
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(DTYPE)
    return state


class Adam:
    def __init__(self, params: list[Tensor], learning_rate: float = 0.001, **kwargs):
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate, **kwargs)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)
