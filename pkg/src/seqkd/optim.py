"""Adam with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """Optimizer hyperparameters plus per-parameter moment accumulators."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState) -> None:
    """One in-place Adam update with bias correction and decoupled weight decay.

    Missing or None gradients are treated as zero. A non-finite gradient
    aborts before any parameter or accumulator is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
