"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterStore


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """Apply one Adam update to every parameter, then zero the gradients.

    Moments live in ``store.slots[name]`` under ``"m"`` and ``"v"``.
    """
    for name in store.names():
        if not store.has_grad(name):
            raise MissingGradientError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in store.names():
        g = store.grad(name)
        slots = store.slots[name]
        m = slots.get("m")
        v = slots.get("v")
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        slots["m"], slots["v"] = m, v
        m_hat = m / bc1
        v_hat = v / bc2
        store.set_value(name, store.value(name) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    store.zero_grad()
