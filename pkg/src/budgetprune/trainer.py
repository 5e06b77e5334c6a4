"""Round-robin simultaneous training of every domain.

Each round visits the domains in a freshly shuffled order and runs one
epoch per domain.  A step on domain ``d`` minimizes
``CE_d + budget_d + sharing(all domains)``; the switches of ``d`` move with
Adam, its BN parameters and head with momentum SGD, and afterwards the
multiplier of ``d`` takes one projected dual-ascent step using the fresh
active fraction.  The backbone never changes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import rng as rngmod
from .autograd import Tensor, linear, no_grad, softmax_cross_entropy
from .datakit import DomainDataset, iter_batches
from .model import MultiDomainModel, _f32
from .objective import (
    BudgetLossState,
    SharingLossConfig,
    budget_loss,
    cross_entropy,
    hard_intersection_fraction,
    sharing_loss,
    ste,
    total_loss,
    update_multiplier,
)
from .optim import AdamState, SGDState, adaptive_mask_step, sgd_momentum_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    beta: float = 0.5
    lambda_ps: float = 1.0
    epochs: int = 10
    batch_size: int = 16
    classifier_lr: float = 0.02
    mask_lr: float = 1e-4
    decay_epochs: list[int] = field(default_factory=lambda: [7])
    decay_factor: float = 0.1
    momentum: float = 0.9
    lambda_lr: float = 0.1
    seed: int = 0
    shuffle_domains: bool = True
    hflip: list[str] = field(default_factory=list)
    normalize: bool = False
    ste_clip: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.classifier_lr <= 0 or self.mask_lr <= 0 or self.lambda_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_ps < 0:
            raise ValueError(f"lambda_ps must be >= 0, got {self.lambda_ps}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_scale(self, epoch: int) -> float:
        return self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)


@dataclass
class OptimizerState:
    sgd: dict[str, SGDState] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)


@dataclass
class History:
    steps: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)


def _as_train_split(data) -> DomainDataset:
    return data["train"] if isinstance(data, Mapping) else data


def _fmt(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(model: MultiDomainModel, datasets: Mapping, cfg: TrainConfig, log_path=None,
          on_round: Callable[[int, MultiDomainModel, "History"], None] | None = None
          ) -> tuple[MultiDomainModel, History, BudgetLossState]:
    """Train every registered domain simultaneously.

    ``datasets`` maps domain name to either a dataset or a split dict with
    a ``"train"`` entry.  Returns the (same, mutated) model, the history and
    the final multiplier state.
    """
    names = model.domain_names
    missing = [n for n in names if n not in datasets]
    if missing:
        raise ValueError(f"no training data for domains {missing}; all domains must train together")
    train_sets = {n: _as_train_split(datasets[n]) for n in names}
    for n, ds in train_sets.items():
        if len(ds) == 0:
            raise ValueError(f"training set for domain {n!r} is empty")
        if ds.num_classes != model.domain(n).num_classes:
            raise ValueError(f"domain {n!r}: dataset has {ds.num_classes} classes, head has "
                             f"{model.domain(n).num_classes}")
    if len(names) < 2:
        log.warning("training a single domain: the sharing loss is degenerate")
    kernels_before = {i: k.data.copy() for i, k in model.kernels.items()}
    model.ste_clip = cfg.ste_clip
    binarize = ste(model.threshold, cfg.ste_clip)
    budget = BudgetLossState(cfg.beta, {n: 0.0 for n in names}, lr=cfg.lambda_lr)
    sharing = SharingLossConfig(cfg.lambda_ps, model.arch.switch_count, cfg.ste_clip)
    opt = OptimizerState({n: SGDState() for n in names}, {n: AdamState() for n in names})
    history = History()
    all_switches = [s for d in model.domains.values() for s in d.mask_parameters()]
    log_fh = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = list(names)
            if cfg.shuffle_domains:
                perm = rngmod.stream(cfg.seed, "order", epoch).permutation(len(names))
                order = [names[i] for i in perm]
            scale = cfg.lr_scale(epoch)
            for name in order:
                state = model.domain(name)
                ds = train_sets[name]
                for x, y in iter_batches(ds, cfg.batch_size, cfg.seed, epoch, hflip=name in cfg.hflip,
                                         normalize=cfg.normalize):
                    for p in all_switches + state.classifier_parameters():
                        p.grad = None
                    logits = model.forward(name, x, "train")
                    ce = cross_entropy(logits, y)
                    lb = budget_loss(state.mask_set(model.threshold), budget, binarize)
                    lps = sharing_loss(model.mask_sets(), sharing, cfg.beta, binarize)
                    loss = total_loss(ce, lb, lps)
                    record = {"step": step, "epoch": epoch, "domain": name, "ce": ce.item(), "lb": lb.item(),
                              "lps": lps.item(), "total": loss.item()}
                    if not math.isfinite(record["total"]):
                        record["lambda"] = dict(budget.lambdas)
                        raise TrainingDiverged(f"non-finite loss at step {step}: {_fmt(record)}", record)
                    loss.backward()
                    adaptive_mask_step(state.mask_parameters(), None, opt.adam[name], cfg.mask_lr * scale)
                    sgd_momentum_step(state.classifier_parameters(), None, opt.sgd[name],
                                      cfg.classifier_lr * scale, cfg.momentum)
                    update_multiplier(budget, name, state.mask_set(model.threshold).active_fraction)
                    record["lambda"] = {n: budget.lambdas[n] for n in names}
                    record["active"] = {n: model.domain(n).mask_set(model.threshold).active_fraction
                                        for n in names}
                    record["intersection"] = hard_intersection_fraction(model.mask_sets())
                    history.steps.append(record)
                    if log_fh is not None:
                        log_fh.write(_fmt(record) + "\n")
                    step += 1
            summary = {"epoch": epoch, "order": order, "lr_scale": scale,
                       "active": {n: model.domain(n).mask_set(model.threshold).active_fraction for n in names},
                       "intersection": hard_intersection_fraction(model.mask_sets()),
                       "lambda": dict(budget.lambdas)}
            history.rounds.append(summary)
            log.info("round %d: active=%s intersection=%.3f", epoch,
                     {k: round(v, 3) for k, v in summary["active"].items()}, summary["intersection"])
            if on_round is not None:
                on_round(epoch, model, history)
    finally:
        if log_fh is not None:
            log_fh.close()
    for i, k in model.kernels.items():
        if not np.array_equal(k.data, kernels_before[i]):
            raise AssertionError(f"backbone kernel {i} changed during training")
    return model, history, budget


def predict(model: MultiDomainModel, domain: str, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(domain, images[start:start + batch_size], "eval")
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: MultiDomainModel, dataset: DomainDataset, domain: str | None = None,
             batch_size: int = 64, normalize: bool = False) -> float:
    """Top-1 accuracy in eval mode (binarized switches, running BN stats)."""
    if len(dataset) == 0:
        raise ValueError(f"cannot evaluate on an empty dataset ({dataset.name!r})")
    domain = dataset.name if domain is None else domain
    model.domain(domain)
    preds = predict(model, domain, dataset.float_images(normalize), batch_size)
    return float(np.mean(preds == dataset.labels))


def pretrain_backbone(model: MultiDomainModel, dataset: DomainDataset, epochs: int = 5, lr: float = 0.05,
                      batch_size: int = 16, momentum: float = 0.9, seed: int = 0
                      ) -> tuple[float, tuple[Tensor, Tensor]]:
    """Train the backbone kernels and backbone BN on a source dataset, then freeze.

    The trained values are rounded to float32 (the storage precision) and
    every registered domain's BN set is reset to a copy of the trained
    backbone BN.  Returns the final-epoch mean training loss and the
    temporary source head (useful with ``backbone_accuracy``).
    """
    for k in model.kernels.values():
        k.requires_grad = True
    for bn in model.backbone_bn.values():
        bn.gamma.requires_grad = bn.shift.requires_grad = True
    gen = rngmod.stream(seed, "pretrain-head")
    feat = model.arch.feature_dim
    head = (Tensor(gen.standard_normal((feat, dataset.num_classes)) / np.sqrt(feat), requires_grad=True),
            Tensor(np.zeros(dataset.num_classes), requires_grad=True))
    params = [model.kernels[i] for i in sorted(model.kernels)]
    for i in sorted(model.backbone_bn):
        params += [model.backbone_bn[i].gamma, model.backbone_bn[i].shift]
    params += list(head)
    state = SGDState()
    mean_loss = float("nan")
    for epoch in range(epochs):
        losses = []
        for x, y in iter_batches(dataset, batch_size, seed, epoch):
            for p in params:
                p.grad = None
            loss = softmax_cross_entropy(model.forward(None, x, "train", head=head), y)
            loss.backward()
            sgd_momentum_step(params, None, state, lr, momentum)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
    for i in model.kernels:
        model.kernels[i].data[...] = _f32(model.kernels[i].data)
    for bn in model.backbone_bn.values():
        bn.gamma.data[...] = _f32(bn.gamma.data)
        bn.shift.data[...] = _f32(bn.shift.data)
        bn.running_mean[...] = _f32(bn.running_mean)
        bn.running_var[...] = _f32(bn.running_var)
    model.freeze_backbone()
    for d in model.domains.values():
        d.bn = {i: model.backbone_bn[i].clone() for i in model.arch.bn_layers}
    return mean_loss, head


def backbone_accuracy(model: MultiDomainModel, head: tuple[Tensor, Tensor], dataset: DomainDataset) -> float:
    with no_grad():
        logits = model.forward(None, dataset.float_images(), "eval", head=head)
    return float(np.mean(logits.data.argmax(axis=1) == dataset.labels))


def train_linear_probe(dataset: DomainDataset, epochs: int = 30, lr: float = 0.05, batch_size: int = 16,
                       seed: int = 0) -> tuple[Tensor, Tensor]:
    """Softmax regression on raw pixels (a reference point for task difficulty)."""
    dim = int(np.prod(dataset.images.shape[1:]))
    w = Tensor(np.zeros((dim, dataset.num_classes)), requires_grad=True)
    b = Tensor(np.zeros(dataset.num_classes), requires_grad=True)
    state = SGDState()
    for epoch in range(epochs):
        for x, y in iter_batches(dataset, batch_size, seed, epoch):
            w.grad = b.grad = None
            loss = softmax_cross_entropy(linear(Tensor(x.reshape(len(x), dim)), w, b), y)
            loss.backward()
            sgd_momentum_step([w, b], None, state, lr)
    return w, b


def linear_probe_accuracy(probe: tuple[Tensor, Tensor], dataset: DomainDataset) -> float:
    x = dataset.float_images().reshape(len(dataset), -1)
    with no_grad():
        logits = linear(Tensor(x), *probe)
    return float(np.mean(logits.data.argmax(axis=1) == dataset.labels))
