"""Shared frozen backbone with per-domain switches, batch-norm sets and heads.

For domain ``d`` the forward pass touches only the shared kernels and the
domain's own switch vectors, batch-norm parameters and classifier head.
Each masked conv layer carries one switch per input channel per domain; the
channel's response is multiplied by the switch before the output channels
are summed.

Train-time switch handling depends on ``switch_mode``:

* ``"ste"`` (default): the forward pass uses the hard-thresholded switch
  (``1`` if ``s > threshold`` else ``0``) and gradients reach the real value
  through a straight-through estimator.  Train and eval outputs agree.
* ``"real"``: the real-valued switch scales the channel directly.

Eval mode always uses the hard-thresholded switches and running BN stats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .architecture import Architecture
from .autograd import (
    Tensor,
    add,
    as_tensor,
    batchnorm2d,
    binarize_ste,
    conv2d,
    global_avg_pool,
    linear,
    masked_conv2d,
    max_pool2d,
    relu,
    take_channels,
)
from .autograd.tensor import ShapeError

SWITCH_INIT = 1e-3
SWITCH_MODES = ("ste", "real")


class UnknownDomainError(KeyError):
    pass


def _f32(a: np.ndarray) -> np.ndarray:
    # values exactly representable in float32 survive the on-disk format
    return a.astype(np.float32).astype(np.float64)


@dataclass
class BNParams:
    gamma: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, trainable: bool = True) -> "BNParams":
        return cls(Tensor(np.ones(channels), requires_grad=trainable),
                   Tensor(np.zeros(channels), requires_grad=trainable),
                   np.zeros(channels), np.ones(channels))

    def clone(self, trainable: bool = True) -> "BNParams":
        return BNParams(Tensor(self.gamma.data.copy(), requires_grad=trainable),
                        Tensor(self.shift.data.copy(), requires_grad=trainable),
                        self.running_mean.copy(), self.running_var.copy())

    @property
    def float_count(self) -> int:
        return 4 * self.gamma.size


@dataclass
class DomainMaskSet:
    """One domain's switch vectors, one per masked conv layer, in layer order."""

    domain: str
    switches: list[Tensor]
    threshold: float = 0.0

    @property
    def total(self) -> int:
        return sum(s.size for s in self.switches)

    def binary(self) -> list[np.ndarray]:
        return [(s.data > self.threshold).astype(np.float64) for s in self.switches]

    @property
    def active_fraction(self) -> float:
        total = self.total
        return float(sum(b.sum() for b in self.binary()) / total) if total else 0.0


@dataclass
class DomainState:
    name: str
    num_classes: int
    switches: dict[int, Tensor]
    bn: dict[int, BNParams]
    head_weight: Tensor
    head_bias: Tensor

    def mask_set(self, threshold: float = 0.0) -> DomainMaskSet:
        return DomainMaskSet(self.name, [self.switches[i] for i in sorted(self.switches)], threshold)

    def mask_parameters(self) -> list[Tensor]:
        return [self.switches[i] for i in sorted(self.switches)]

    def classifier_parameters(self) -> list[Tensor]:
        params = []
        for i in sorted(self.bn):
            params += [self.bn[i].gamma, self.bn[i].shift]
        return params + [self.head_weight, self.head_bias]


@dataclass
class MultiDomainModel:
    arch: Architecture
    kernels: dict[int, Tensor]
    backbone_bn: dict[int, BNParams]
    domains: dict[str, DomainState] = field(default_factory=dict)
    seed: int = 0
    switch_mode: str = "ste"
    threshold: float = 0.0
    ste_clip: float = 1.0
    origin_arch: Architecture | None = None

    def __post_init__(self):
        if self.switch_mode not in SWITCH_MODES:
            raise ValueError(f"switch_mode must be one of {SWITCH_MODES}, got {self.switch_mode!r}")
        if self.origin_arch is None:
            self.origin_arch = self.arch.copy()

    # -- registry -------------------------------------------------------------
    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    def domain(self, name: str) -> DomainState:
        try:
            return self.domains[name]
        except KeyError:
            raise UnknownDomainError(f"unknown domain {name!r}; registered: {self.domain_names}") from None

    def add_domain(self, name: str, num_classes: int, switch_init: float = SWITCH_INIT) -> DomainState:
        if name in self.domains:
            raise ValueError(f"domain {name!r} already registered")
        if num_classes < 1:
            raise ValueError(f"domain {name!r}: num_classes must be positive")
        gen = rngmod.stream(self.seed, "head", name)
        feat = self.arch.feature_dim
        switches = {i: Tensor(np.full(self.arch.layers[i].n_read, switch_init), requires_grad=True)
                    for i in self.arch.masked_layers}
        bn = {i: self.backbone_bn[i].clone() for i in self.arch.bn_layers}
        weight = Tensor(_f32(gen.standard_normal((feat, num_classes)) / np.sqrt(feat)), requires_grad=True)
        bias = Tensor(np.zeros(num_classes), requires_grad=True)
        state = DomainState(name, num_classes, switches, bn, weight, bias)
        self.domains[name] = state
        return state

    def mask_sets(self) -> list[DomainMaskSet]:
        return [d.mask_set(self.threshold) for d in self.domains.values()]

    def freeze_backbone(self) -> None:
        for k in self.kernels.values():
            k.requires_grad = False
        for bn in self.backbone_bn.values():
            bn.gamma.requires_grad = False
            bn.shift.requires_grad = False

    # -- forward ------------------------------------------------------------------
    def forward(self, domain: str | None, batch, mode: str = "eval", head: tuple[Tensor, Tensor] | None = None
                ) -> Tensor:
        """Logits for ``domain`` on an NCHW batch.

        ``domain=None`` runs the plain backbone (every channel on, backbone
        BN) with the supplied ``head``; it is used for backbone pretraining.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        x = as_tensor(batch)
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            raise ShapeError(f"input batch shape {x.shape} does not match architecture input "
                             f"{self.arch.input_shape}")
        if domain is None:
            if head is None:
                raise ValueError("backbone forward needs an explicit head")
            state = None
            bn_sets = self.backbone_bn
            head_w, head_b = head
        else:
            state = self.domain(domain)
            bn_sets = state.bn
            head_w, head_b = state.head_weight, state.head_bias
        outputs: list[Tensor] = []
        for i, layer in enumerate(self.arch.layers):
            if layer.type == "conv":
                inp = x if layer.keep is None else take_channels(x, np.asarray(layer.keep))
                if layer.masked and state is not None:
                    x = masked_conv2d(inp, self.kernels[i], self._switch(state.switches[i], training),
                                      layer.stride, layer.padding)
                else:
                    x = conv2d(inp, self.kernels[i], layer.stride, layer.padding)
            elif layer.type == "bn":
                p = bn_sets[i]
                x = batchnorm2d(x, p.gamma, p.shift, p.running_mean, p.running_var, training)
            elif layer.type == "relu":
                x = relu(x)
            elif layer.type == "maxpool":
                x = max_pool2d(x, layer.kernel, layer.stride)
            elif layer.type == "add":
                x = add(x, outputs[layer.source])
            elif layer.type == "gap":
                x = global_avg_pool(x)
            outputs.append(x)
        return linear(x, head_w, head_b)

    def _switch(self, s: Tensor, training: bool) -> Tensor:
        if not training:
            return Tensor((s.data > self.threshold).astype(np.float64))
        if self.switch_mode == "ste":
            return binarize_ste(s, self.threshold, self.ste_clip)
        return s

    __call__ = forward

    # -- bookkeeping --------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array that makes up the model, keyed by a stable name."""
        arrays: dict[str, np.ndarray] = {}
        for i in sorted(self.kernels):
            arrays[f"kernel.{i}"] = self.kernels[i].data
        for i in sorted(self.backbone_bn):
            _bn_arrays(arrays, f"backbone.bn.{i}", self.backbone_bn[i])
        for k, (name, d) in enumerate(self.domains.items()):
            for i in sorted(d.switches):
                arrays[f"domain.{k}.switch.{i}"] = d.switches[i].data
            for i in sorted(d.bn):
                _bn_arrays(arrays, f"domain.{k}.bn.{i}", d.bn[i])
            arrays[f"domain.{k}.head.weight"] = d.head_weight.data
            arrays[f"domain.{k}.head.bias"] = d.head_bias.data
        return arrays


def _bn_arrays(arrays: dict, prefix: str, bn: BNParams) -> None:
    arrays[f"{prefix}.gamma"] = bn.gamma.data
    arrays[f"{prefix}.shift"] = bn.shift.data
    arrays[f"{prefix}.mean"] = bn.running_mean
    arrays[f"{prefix}.var"] = bn.running_var


def build_from_descriptor(arch: Architecture, domains, seed: int = 0, switch_mode: str = "ste",
                          threshold: float = 0.0, switch_init: float = SWITCH_INIT,
                          freeze: bool = True) -> MultiDomainModel:
    """Build a model: He-scaled random backbone kernels plus one state per domain.

    ``domains`` is a sequence of ``(name, num_classes)`` pairs.
    """
    gen = rngmod.stream(seed, "backbone")
    kernels = {}
    for i in arch.conv_layers:
        layer = arch.layers[i]
        fan_in = layer.n_read * layer.kernel * layer.kernel
        w = gen.standard_normal((layer.out_channels, layer.n_read, layer.kernel, layer.kernel))
        kernels[i] = Tensor(_f32(w * np.sqrt(2.0 / fan_in)), requires_grad=not freeze)
    backbone_bn = {i: BNParams.fresh(arch.shapes[i][0], trainable=not freeze) for i in arch.bn_layers}
    model = MultiDomainModel(arch, kernels, backbone_bn, seed=seed, switch_mode=switch_mode, threshold=threshold)
    for name, num_classes in domains:
        model.add_domain(name, int(num_classes), switch_init)
    if freeze:
        model.freeze_backbone()
    return model


def binarize_masks(model: MultiDomainModel, threshold: float | None = None) -> dict[str, tuple[list[np.ndarray], float]]:
    """Per-domain binary switch vectors and active fraction."""
    tau = model.threshold if threshold is None else threshold
    out = {}
    for name, d in model.domains.items():
        ms = d.mask_set(tau)
        out[name] = (ms.binary(), ms.active_fraction)
    return out
