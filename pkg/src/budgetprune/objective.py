"""Training objective: cross-entropy + budget loss + parameter-sharing loss.

Both the budget loss and the sharing loss look at binarized switches.  By
default binarization is the straight-through estimator from
``autograd.binarize_ste`` (hard forward, identity backward inside the clip
range); any callable ``Tensor -> Tensor`` can be passed instead, e.g. the
identity to evaluate the relaxed objective on continuous switch values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, binarize_ste, concat, mean_all, mul, relu, softmax_cross_entropy, sum_all
from .model import DomainMaskSet

log = logging.getLogger(__name__)

Binarizer = Callable[[Tensor], Tensor]


def ste(threshold: float = 0.0, clip: float = 1.0) -> Binarizer:
    return lambda s: binarize_ste(s, threshold, clip)


def identity(s: Tensor) -> Tensor:
    return s


@dataclass
class BudgetLossState:
    """Budget ``beta`` and one non-negative multiplier per domain."""

    beta: float
    lambdas: dict[str, float] = field(default_factory=dict)
    lr: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"budget beta must lie in [0, 1], got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"multiplier learning rate must be positive, got {self.lr}")
        for name, lam in self.lambdas.items():
            if lam < 0:
                raise ValueError(f"multiplier for {name!r} is negative: {lam}")

    def __setattr__(self, key, value):
        if key == "beta" and "beta" in self.__dict__:
            raise AttributeError("beta is fixed for the lifetime of a run")
        super().__setattr__(key, value)

    def lam(self, domain: str) -> float:
        return self.lambdas.get(domain, 0.0)


@dataclass
class SharingLossConfig:
    weight: float  # lambda_PS
    total_switches: int  # M
    clip: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"sharing-loss weight must be >= 0, got {self.weight}")
        if self.total_switches <= 0:
            raise ValueError(f"total switch count must be positive, got {self.total_switches}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(logits, labels)


def active_fraction(mask_set: DomainMaskSet, binarize: Binarizer | None = None) -> Tensor:
    """Mean binarized switch value over every masked layer of one domain."""
    binarize = binarize or ste(mask_set.threshold)
    return mean_all(concat([binarize(s) for s in mask_set.switches]))


def budget_loss(mask_set: DomainMaskSet, state: BudgetLossState, binarize: Binarizer | None = None) -> Tensor:
    """``max(0, lambda_d * (mean_active - beta))``."""
    frac = active_fraction(mask_set, binarize)
    return relu(mul(frac - state.beta, state.lam(mask_set.domain)))


def update_multiplier(state: BudgetLossState, domain: str, fraction: float) -> float:
    """Projected dual ascent: ``lambda <- max(0, lambda + lr * (fraction - beta))``."""
    lam = max(0.0, state.lam(domain) + state.lr * (float(fraction) - state.beta))
    state.lambdas[domain] = lam
    return lam


def intersection_size(mask_sets: Sequence[DomainMaskSet], binarize: Binarizer | None = None) -> Tensor:
    """Number of switch positions on in every domain (product of binarized masks, summed)."""
    if not mask_sets:
        raise ValueError("intersection needs at least one domain")
    binarize = binarize or ste(mask_sets[0].threshold)
    vectors = [concat([binarize(s) for s in ms.switches]) for ms in mask_sets]
    shape = vectors[0].shape
    for ms, v in zip(mask_sets, vectors):
        if v.shape != shape:
            raise ValueError(f"domain {ms.domain!r} has {v.size} switches, expected {shape[0]}")
    prod = vectors[0]
    for v in vectors[1:]:
        prod = mul(prod, v)
    return sum_all(prod)


def sharing_loss(mask_sets: Sequence[DomainMaskSet], cfg: SharingLossConfig, beta: float,
                 binarize: Binarizer | None = None) -> Tensor:
    """``max(0, lambda_PS * (1 - |intersection| / (M * beta)))``."""
    if len(mask_sets) < 2:
        log.warning("sharing loss over %d domain(s) is degenerate", len(mask_sets))
    if beta <= 0:
        raise ValueError("sharing loss needs a positive budget")
    binarize = binarize or ste(mask_sets[0].threshold, cfg.clip)
    inter = intersection_size(mask_sets, binarize)
    return relu(mul(1.0 - inter * (1.0 / (cfg.total_switches * beta)), cfg.weight))


def total_loss(ce: Tensor, lb: Tensor, lps: Tensor) -> Tensor:
    return ce + lb + lps


def hard_intersection_fraction(mask_sets: Sequence[DomainMaskSet]) -> float:
    """``|intersection| / M`` computed on hard binary masks."""
    vectors = [np.concatenate(ms.binary()) for ms in mask_sets]
    return float(np.prod(vectors, axis=0).sum() / vectors[0].size)
