"""Adam with bias correction and the step-then-linear learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ParamStore


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls(0, {k: np.zeros_like(n.value) for k, n in params.items()},
                   {k: np.zeros_like(n.value) for k, n in params.items()})


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas=(0.99, 0.999), eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place from ``grads``; returns the advanced state."""
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for path, node in params.items():
        g = grads[path]
        if g.shape != node.value.shape:
            raise ValueError(f"gradient for {path} has shape {g.shape}, expected {node.value.shape}")
        m = state.m.get(path)
        v = state.v.get(path)
        if m is None:
            m = np.zeros_like(node.value)
            v = np.zeros_like(node.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        node.value = (node.value - update).astype(node.value.dtype)
        state.m[path] = m.astype(node.value.dtype)
        state.v[path] = v.astype(node.value.dtype)
    state.step = step
    return state


def lr_schedule(epoch: int, lr0: float = 1e-4, lr_final: float = 1e-6, decay_start: int = 200,
                epochs: int = 300) -> float:
    """Constant ``lr0``, then linear from ``lr0`` at ``decay_start`` to ``lr_final`` at the last epoch."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epoch < decay_start:
        return lr0
    span = epochs - 1 - decay_start
    if span <= 0:
        return lr_final
    t = (epoch - decay_start) / span
    return lr0 * (1 - t) + lr_final * t
