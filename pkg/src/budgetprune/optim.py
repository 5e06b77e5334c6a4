"""Momentum SGD (classifier heads and BN) and Adam (switches)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class SGDState:
    velocity: list[np.ndarray] = field(default_factory=list)


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def _grads(params: list[Tensor], grads):
    if grads is not None:
        return grads
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def sgd_momentum_step(params: list[Tensor], grads, state: SGDState, lr: float, momentum: float = 0.9) -> None:
    """``v <- momentum * v + g``; ``p <- p - lr * v`` (in place)."""
    grads = _grads(params, grads)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        v *= momentum
        v += g
        p.data -= lr * v


def adaptive_mask_step(params: list[Tensor], grads, state: AdamState, lr: float, beta1: float = 0.9,
                       beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update (in place)."""
    grads = _grads(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
