"""Adam with bias correction, updating parameters in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, TrainingError
from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None] | None, state: AdamState) -> None:
    """Apply one Adam update to ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a ``None`` entry is
    treated as a zero gradient. Raises :class:`TrainingError` naming the
    first parameter whose gradient is not finite.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.isfinite(g).all():
            label = p.name or f"#{i}"
            raise TrainingError(f"non-finite gradient for parameter {label} {p.shape}")
        if g is not None and np.shape(g) != p.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")

    state.step += 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.learning_rate, state.epsilon
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
