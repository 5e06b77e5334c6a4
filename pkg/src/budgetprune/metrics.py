"""Cost accounting and the S-score family.

Counting rules
--------------
MACs: one per multiply-add.  A conv layer costs ``H' * W' * O * C_used * kh * kw``
where ``C_used`` is the number of input channels the domain's binary mask
keeps (masked layers) or the number of channels the kernel reads
(unmasked layers, ``domain=None``).  A classifier head costs ``in * out``.
BN, activations, pooling and residual adds are not counted.

Parameter memory: each shared kernel value is a 32-bit float (4 bytes).
Every domain stores its own BN set (gamma, shift, running mean, running
variance; 4 floats per channel, 4 bytes each) and one bit per switch,
rounded up to whole bytes per switch vector.  Classifier heads are
excluded.  A model without domains counts the backbone's own BN set.
Ratios divide by the unpruned backbone: all kernels plus one BN set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .architecture import Architecture
from .model import MultiDomainModel

FLOAT_BYTES = 4
BN_FLOATS_PER_CHANNEL = 4
CSV_SCHEMA_VERSION = 1


# -- MACs ------------------------------------------------------------------

def conv_macs(out_h: int, out_w: int, out_channels: int, in_channels: int, kh: int, kw: int) -> int:
    return out_h * out_w * out_channels * in_channels * kh * kw


def arch_macs(arch: Architecture, active: Mapping[int, int] | None = None, num_classes: int | None = None) -> int:
    """MACs of ``arch``; ``active`` overrides the used input channels per conv layer."""
    total = 0
    for i, layer in enumerate(arch.layers):
        if layer.type == "conv":
            _, ho, wo = arch.shapes[i]
            used = layer.n_read if active is None or i not in active else active[i]
            total += conv_macs(ho, wo, layer.out_channels, used, layer.kernel, layer.kernel)
        elif layer.type not in ("bn", "relu", "maxpool", "add", "gap"):
            raise ValueError(f"layer {i}: unknown layer type {layer.type!r}")
    if num_classes is not None:
        total += arch.feature_dim * num_classes
    return total


def count_macs(model: MultiDomainModel, domain: str | None = None, input_shape=None) -> int:
    """MACs of one forward pass for ``domain`` (eval mode, binary masks).

    With ``domain=None`` every channel the (possibly compact) kernels read
    is counted and no head is added.
    """
    if input_shape is not None and tuple(input_shape)[-3:] != model.arch.input_shape:
        raise ValueError(f"input shape {input_shape} does not match architecture {model.arch.input_shape}")
    if domain is None:
        return arch_macs(model.arch)
    state = model.domain(domain)
    active = {i: int((s.data > model.threshold).sum()) for i, s in state.switches.items()}
    return arch_macs(model.arch, active, state.num_classes)


def backbone_macs(model: MultiDomainModel, domain: str | None = None) -> int:
    classes = None if domain is None else model.domain(domain).num_classes
    return arch_macs(model.origin_arch, None, classes)


def mac_ratio(model: MultiDomainModel, domain: str | None = None) -> float:
    return count_macs(model, domain) / backbone_macs(model, domain)


# -- parameter memory ----------------------------------------------------------

def tensor_bytes(shape: Sequence[int]) -> int:
    return int(np.prod(shape, dtype=np.int64)) * FLOAT_BYTES


def switch_bytes(n_switches: int) -> int:
    return math.ceil(n_switches / 8)


def _kernel_floats(arch: Architecture) -> int:
    return sum(l.out_channels * l.n_read * l.kernel * l.kernel for l in (arch.layers[i] for i in arch.conv_layers))


def _bn_floats(arch: Architecture) -> int:
    return sum(BN_FLOATS_PER_CHANNEL * arch.shapes[i][0] for i in arch.bn_layers)


def backbone_bytes(arch: Architecture) -> int:
    return FLOAT_BYTES * (_kernel_floats(arch) + _bn_floats(arch))


def count_param_bytes(model: MultiDomainModel, include_domains: bool = True) -> int:
    arch = model.arch
    total = FLOAT_BYTES * _kernel_floats(arch)
    n_domains = len(model.domains) if include_domains else 0
    total += FLOAT_BYTES * _bn_floats(arch) * max(1, n_domains)
    if include_domains:
        for d in model.domains.values():
            total += sum(switch_bytes(s.size) for s in d.switches.values())
    return total


def param_ratio(model: MultiDomainModel) -> float:
    return count_param_bytes(model) / backbone_bytes(model.origin_arch)


# -- S-score -------------------------------------------------------------------

@dataclass
class SScoreConfig:
    """Per-domain ``Err_max``, exponent ``gamma`` and coefficient ``alpha``."""

    err_max: dict[str, float]
    gamma: dict[str, float]
    alpha: dict[str, float]
    baseline_error: dict[str, float] = field(default_factory=dict)
    per_domain_max: float = 1000.0

    def __post_init__(self):
        if set(self.err_max) != set(self.gamma) or set(self.err_max) != set(self.alpha):
            raise ValueError("err_max, gamma and alpha must cover the same domains")
        for d in self.err_max:
            top = self.alpha[d] * self.err_max[d] ** self.gamma[d]
            if not math.isclose(top, self.per_domain_max, rel_tol=1e-9):
                raise ValueError(f"domain {d!r}: alpha * err_max^gamma = {top}, expected {self.per_domain_max}")

    @classmethod
    def from_baseline(cls, baseline_error: Mapping[str, float], gamma: float = 2.0, factor: float = 2.0,
                      per_domain_max: float = 1000.0) -> "SScoreConfig":
        err_max, alpha = {}, {}
        for d, e in baseline_error.items():
            if not 0.0 < e <= 1.0:
                raise ValueError(f"baseline error for {d!r} must lie in (0, 1], got {e}")
            err_max[d] = factor * e
            alpha[d] = per_domain_max / err_max[d] ** gamma
        return cls(err_max, {d: gamma for d in baseline_error}, alpha, dict(baseline_error), per_domain_max)

    @property
    def max_score(self) -> float:
        return self.per_domain_max * len(self.err_max)

    def to_dict(self) -> dict:
        return asdict(self)


def s_score(errors: Mapping[str, float], cfg: SScoreConfig) -> float:
    """``sum_d alpha_d * max(0, Err_max_d - Err_d) ** gamma_d``."""
    if set(errors) != set(cfg.err_max):
        raise ValueError(f"errors cover {sorted(errors)}, config covers {sorted(cfg.err_max)}")
    total = 0.0
    for d, e in errors.items():
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"error for {d!r} must lie in [0, 1], got {e}")
        total += cfg.alpha[d] * max(0.0, cfg.err_max[d] - e) ** cfg.gamma[d]
    return total


def s_per_cost(score: float, mac_ratio: float, param_ratio: float) -> tuple[float, float]:
    """``(S / mac_ratio, S / param_ratio)``."""
    if mac_ratio <= 0 or param_ratio <= 0:
        raise ValueError(f"cost ratios must be positive, got mac_ratio={mac_ratio}, param_ratio={param_ratio}")
    return score / mac_ratio, score / param_ratio


# -- reports ---------------------------------------------------------------------

@dataclass
class CostReport:
    macs: dict[str, int]
    mac_ratio_per_domain: dict[str, float]
    mac_ratio: float
    structural_mac_ratio: float
    param_bytes: int
    param_ratio: float
    accuracy: dict[str, float] = field(default_factory=dict)
    s: float | None = None
    s_o: float | None = None
    s_p: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def with_scores(self, cfg: SScoreConfig) -> "CostReport":
        errors = {d: 1.0 - a for d, a in self.accuracy.items()}
        self.s = s_score(errors, cfg)
        self.s_o, self.s_p = s_per_cost(self.s, self.mac_ratio, self.param_ratio)
        return self


def cost_report(model: MultiDomainModel, accuracy: Mapping[str, float] | None = None) -> CostReport:
    """Costs of ``model``; ``mac_ratio`` is the mean of the per-domain ratios."""
    names = model.domain_names
    macs = {d: count_macs(model, d) for d in names}
    ratios = {d: macs[d] / backbone_macs(model, d) for d in names}
    mean_ratio = float(np.mean(list(ratios.values()))) if names else 1.0
    return CostReport(macs, ratios, mean_ratio, count_macs(model) / backbone_macs(model), count_param_bytes(model),
                      param_ratio(model), dict(accuracy or {}))


def csv_columns(domains: Sequence[str]) -> list[str]:
    return (["schema_version", "beta", "lambda_ps", "seed"] + [f"acc_{d}" for d in domains]
            + ["mac_ratio", "param_ratio", "S", "S_O", "S_P"])


def csv_row(report: CostReport, beta: float, lambda_ps: float, seed: int, header: bool = True) -> str:
    domains = sorted(report.accuracy)  # fixed column order whatever the dict order
    row = {"schema_version": CSV_SCHEMA_VERSION, "beta": beta, "lambda_ps": lambda_ps, "seed": seed,
           "mac_ratio": f"{report.mac_ratio:.6f}", "param_ratio": f"{report.param_ratio:.6f}",
           "S": "" if report.s is None else f"{report.s:.3f}",
           "S_O": "" if report.s_o is None else f"{report.s_o:.3f}",
           "S_P": "" if report.s_p is None else f"{report.s_p:.3f}"}
    for d in domains:
        row[f"acc_{d}"] = f"{report.accuracy[d]:.6f}"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=csv_columns(domains), lineterminator="\n")
    if header:
        writer.writeheader()
    writer.writerow(row)
    return buf.getvalue()
