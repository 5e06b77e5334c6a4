"""Physical removal of kernel input-channel slices that no domain uses.

A switch that is zero in every domain multiplies its channel response by
zero everywhere, so the matching ``[O, 1, kh, kw]`` kernel slice and the
switch itself can be deleted without changing any output.  The compact
model reads the surviving channels through the conv layer's ``keep`` list.

With ``cascade=True`` the producer filters of channels that are then read
by nobody are removed too, together with their BN entries, provided the
chain from producer to consumer is a plain conv -> (bn|relu|maxpool)* ->
conv path whose intermediate outputs feed nothing else.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .architecture import Architecture
from .autograd import Tensor, no_grad
from .metrics import count_macs, count_param_bytes
from .model import BNParams, DomainMaskSet, DomainState, MultiDomainModel

EQUIVALENCE_TOL = 1e-9


class PruneError(ValueError):
    pass


class EquivalenceError(RuntimeError):
    """The compact model disagrees with the original: a bookkeeping bug."""


@dataclass
class LayerPrune:
    layer: int
    in_channels: int
    kept: list[int]
    removed: int
    origin_kept: list[int]
    producer: int | None = None
    producer_filters_removed: int = 0


@dataclass
class PruneReport:
    """What a prune removed.  Ratios compare the compact model to its input."""

    layers: list[LayerPrune]
    switches_removed: int
    kernel_values_removed: int
    param_ratio: float
    mac_ratio: float
    cascade: bool = False
    equivalence: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for lp in self.layers:
            if len(lp.kept) + lp.removed != lp.in_channels:
                raise PruneError(f"layer {lp.layer}: kept + removed != {lp.in_channels}")
        for name in ("param_ratio", "mac_ratio"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise PruneError(f"{name} must lie in (0, 1], got {getattr(self, name)}")

    @property
    def removed_anything(self) -> bool:
        return self.kernel_values_removed > 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "PruneReport":
        doc = dict(doc)
        doc["layers"] = [LayerPrune(**lp) for lp in doc["layers"]]
        return cls(**doc)

    def table(self) -> str:
        rows = [f"{'layer':>5} {'C':>4} {'kept':>4} {'removed':>7}  producer"]
        for lp in self.layers:
            prod = "-" if lp.producer is None else f"{lp.producer} (-{lp.producer_filters_removed} filters)"
            rows.append(f"{lp.layer:>5} {lp.in_channels:>4} {len(lp.kept):>4} {lp.removed:>7}  {prod}")
        rows.append(f"switches removed: {self.switches_removed}  kernel values removed: "
                    f"{self.kernel_values_removed}")
        rows.append(f"param ratio: {self.param_ratio:.4f}  MAC ratio: {self.mac_ratio:.4f}")
        for d, diff in self.equivalence.items():
            rows.append(f"equivalence {d}: max |dlogit| = {diff:.3e}")
        return "\n".join(rows)


def compute_union(mask_sets: Sequence[DomainMaskSet] | Sequence[Sequence[np.ndarray]]) -> list[list[int]]:
    """Per masked layer, the channel indices switched on in at least one domain."""
    vectors = [m.binary() if isinstance(m, DomainMaskSet) else [np.asarray(v) for v in m] for m in mask_sets]
    if not vectors:
        raise PruneError("no domains to take the union over")
    n_layers = len(vectors[0])
    for k, v in enumerate(vectors):
        if len(v) != n_layers:
            raise PruneError(f"domain {k} has {len(v)} switch vectors, domain 0 has {n_layers}")
        for j, (a, b) in enumerate(zip(v, vectors[0])):
            if a.shape != b.shape:
                raise PruneError(f"masked layer {j}: domain {k} mask shape {a.shape} != domain 0 shape {b.shape}")
    used = [np.zeros(v.shape, dtype=bool) for v in vectors[0]]
    for v in vectors:
        for j, b in enumerate(v):
            used[j] |= np.asarray(b) != 0
    return [np.flatnonzero(u).tolist() for u in used]


def _clone_domain(d: DomainState) -> DomainState:
    return DomainState(d.name, d.num_classes,
                       {i: Tensor(s.data.copy(), requires_grad=True) for i, s in d.switches.items()},
                       {i: bn.clone() for i, bn in d.bn.items()},
                       Tensor(d.head_weight.data.copy(), requires_grad=True),
                       Tensor(d.head_bias.data.copy(), requires_grad=True))


def _slice_bn(bn: BNParams, idx: list[int], trainable: bool) -> BNParams:
    return BNParams(Tensor(bn.gamma.data[idx], requires_grad=trainable),
                    Tensor(bn.shift.data[idx], requires_grad=trainable),
                    bn.running_mean[idx].copy(), bn.running_var[idx].copy())


def prune(model: MultiDomainModel, keep: Sequence[Sequence[int]] | None = None, cascade: bool = False,
          verify: bool = True, n_verify: int = 64, seed: int = 0) -> tuple[MultiDomainModel, PruneReport]:
    """Return a compact copy of ``model`` with unused kernel slices removed.

    ``keep`` lists, per masked layer in layer order, the positions (into the
    current switch vector) to retain; by default it is the union of all
    domains' binary masks.  The input model is left untouched.
    """
    masked = model.arch.masked_layers
    if keep is None:
        keep = compute_union(model.mask_sets())
    keep = [sorted(int(c) for c in k) for k in keep]
    if len(keep) != len(masked):
        raise PruneError(f"expected {len(masked)} keep lists, got {len(keep)}")
    arch = model.arch.copy()
    kernels = {i: k.data.copy() for i, k in model.kernels.items()}
    backbone_bn = {i: bn.clone(trainable=False) for i, bn in model.backbone_bn.items()}
    domains = {n: _clone_domain(d) for n, d in model.domains.items()}
    layer_reports = []
    switches_removed = 0
    values_before = sum(k.size for k in kernels.values())
    for li, k in zip(masked, keep):
        layer = arch.layers[li]
        n = layer.n_read
        if not k:
            raise PruneError(f"layer {li} ({layer.type}): every input channel is switched off in all domains; "
                             "refusing to build a degenerate model")
        if k[0] < 0 or k[-1] >= n or len(set(k)) != len(k):
            raise PruneError(f"layer {li}: keep indices must be unique and in [0, {n})")
        origin = model.arch.origin_input_channels(li)
        layer_reports.append(LayerPrune(li, n, list(k), n - len(k), [origin[c] for c in k]))
        if len(k) == n:
            continue
        switches_removed += (n - len(k)) * len(domains)
        current = layer.keep if layer.keep is not None else list(range(layer.in_channels))
        layer.keep = [current[c] for c in k]
        kernels[li] = kernels[li][:, k]
        for d in domains.values():
            d.switches[li] = Tensor(d.switches[li].data[k], requires_grad=True)
    if cascade:
        _cascade(arch, kernels, backbone_bn, domains, layer_reports)
    arch = Architecture(arch.input_shape, arch.layers, name=arch.name)
    compact = MultiDomainModel(arch, {i: Tensor(v) for i, v in kernels.items()}, backbone_bn, domains,
                               seed=model.seed, switch_mode=model.switch_mode, threshold=model.threshold,
                               ste_clip=model.ste_clip, origin_arch=model.origin_arch.copy())
    values_removed = values_before - sum(k.size for k in kernels.values())
    report = PruneReport(layer_reports, switches_removed, values_removed,
                         count_param_bytes(compact) / count_param_bytes(model),
                         count_macs(compact) / count_macs(model), cascade)
    if verify:
        report.equivalence = verify_equivalence(model, compact, n=n_verify, seed=seed)
        worst = max(report.equivalence.values(), default=0.0)
        if not worst <= EQUIVALENCE_TOL:
            raise EquivalenceError(f"compact model deviates from the original by {worst:.3e} (> {EQUIVALENCE_TOL})")
    return compact, report


def _cascade(arch: Architecture, kernels, backbone_bn, domains, reports: list[LayerPrune]) -> None:
    """Drop producer filters whose outputs the consumer conv no longer reads."""
    by_layer = {r.layer: r for r in reports}
    for li in arch.masked_layers:
        layer = arch.layers[li]
        chain = arch.producer_chain(li)
        if layer.keep is None or chain is None:
            continue
        if any(arch.consumers(j) != [j + 1] for j in chain):
            continue
        p = chain[0]
        producer = arch.layers[p]
        rows = list(layer.keep)
        base = producer.out_keep if producer.out_keep is not None else list(range(producer.out_channels))
        kernels[p] = kernels[p][rows]
        removed = producer.out_channels - len(rows)
        producer.out_keep = [base[r] for r in rows]
        producer.out_channels = len(rows)
        for j in chain[1:]:
            arch.layers[j].in_channels = None
            if arch.layers[j].type == "bn":
                backbone_bn[j] = _slice_bn(backbone_bn[j], rows, False)
                for d in domains.values():
                    d.bn[j] = _slice_bn(d.bn[j], rows, True)
        layer.in_channels = len(rows)
        layer.keep = None
        if li in by_layer:
            by_layer[li].producer = p
            by_layer[li].producer_filters_removed = removed


def verify_equivalence(original: MultiDomainModel, compact: MultiDomainModel, domains: Sequence[str] | None = None,
                       n: int = 64, seed: int = 0) -> dict[str, float]:
    """Max absolute eval-mode logit difference per domain on ``n`` random inputs."""
    if original.arch.input_shape != compact.arch.input_shape:
        raise PruneError(f"input shapes differ: {original.arch.input_shape} vs {compact.arch.input_shape}")
    names = original.domain_names if domains is None else list(domains)
    x = rngmod.stream(seed, "equivalence").standard_normal((n,) + original.arch.input_shape)
    out = {}
    with no_grad():
        for name in names:
            a = original.forward(name, x, "eval").data
            b = compact.forward(name, x, "eval").data
            if a.shape != b.shape:
                raise EquivalenceError(f"domain {name!r}: logit shapes differ, {a.shape} vs {b.shape}")
            out[name] = float(np.max(np.abs(a - b))) if a.size else 0.0
    return out


def expand_masks(model: MultiDomainModel, domain: str) -> dict[int, np.ndarray]:
    """A domain's binary masks in original channel coordinates (zeros where pruned)."""
    state = model.domain(domain)
    out = {}
    for li in model.arch.masked_layers:
        full = np.zeros(model.origin_arch.layers[li].n_read)
        bits = (state.switches[li].data > model.threshold).astype(np.float64)
        full[model.arch.origin_input_channels(li)] = bits
        out[li] = full
    return out
