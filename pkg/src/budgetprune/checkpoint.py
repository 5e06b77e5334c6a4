"""Checkpoint directories.

A checkpoint is a directory holding ``meta.json`` and one tensor blob per
array under ``tensors/``.  Weights, BN parameters and heads are stored as
float32; switch vectors keep float64 so their sign (and thus the binary
mask) survives exactly.  ``meta.json`` records the format version, the
architecture (current and original), the domain registry, the seed, and a
free-form ``extra`` section (budget, multipliers, prune map, ...), plus the
sha256 of every blob.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

from .architecture import Architecture
from .autograd import Tensor
from .autograd import blob
from .model import BNParams, DomainState, MultiDomainModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dtype_for(name: str) -> str:
    return "float64" if ".switch." in name else "float32"


def save(model: MultiDomainModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    (path / "tensors").mkdir(parents=True)
    entries = {}
    for name, arr in model.state_arrays().items():
        data = blob.encode(arr, _dtype_for(name))
        fname = f"tensors/{name}.tblb"
        (path / fname).write_bytes(data)
        entries[name] = {"file": fname, "sha256": hashlib.sha256(data).hexdigest()}
    meta = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "origin_architecture": model.origin_arch.to_dict(),
        "domains": [{"name": d.name, "num_classes": d.num_classes} for d in model.domains.values()],
        "seed": model.seed,
        "switch_mode": model.switch_mode,
        "threshold": model.threshold,
        "ste_clip": model.ste_clip,
        "frozen": not any(k.requires_grad for k in model.kernels.values()),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no checkpoint at {path} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {meta.get('format_version')}")
    return meta


def load(path) -> tuple[MultiDomainModel, dict]:
    """Rebuild a model from ``path``; returns ``(model, meta)``."""
    path = Path(path)
    meta = read_meta(path)
    arrays = {}
    for name, entry in meta["tensors"].items():
        data = (path / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {name!r}")
        arrays[name] = blob.decode(data)
    arch = Architecture.from_dict(meta["architecture"])
    trainable = not meta.get("frozen", True)

    def bn_from(prefix: str) -> BNParams:
        return BNParams(Tensor(arrays[f"{prefix}.gamma"], requires_grad=True),
                        Tensor(arrays[f"{prefix}.shift"], requires_grad=True),
                        arrays[f"{prefix}.mean"].copy(), arrays[f"{prefix}.var"].copy())

    kernels = {i: Tensor(arrays[f"kernel.{i}"], requires_grad=trainable) for i in arch.conv_layers}
    backbone_bn = {}
    for i in arch.bn_layers:
        bn = bn_from(f"backbone.bn.{i}")
        bn.gamma.requires_grad = bn.shift.requires_grad = trainable
        backbone_bn[i] = bn
    model = MultiDomainModel(arch, kernels, backbone_bn, seed=meta["seed"], switch_mode=meta["switch_mode"],
                             threshold=meta["threshold"], ste_clip=meta.get("ste_clip", 1.0),
                             origin_arch=Architecture.from_dict(meta["origin_architecture"]))
    for k, entry in enumerate(meta["domains"]):
        switches = {i: Tensor(arrays[f"domain.{k}.switch.{i}"], requires_grad=True) for i in arch.masked_layers}
        bn = {i: bn_from(f"domain.{k}.bn.{i}") for i in arch.bn_layers}
        model.domains[entry["name"]] = DomainState(
            entry["name"], entry["num_classes"], switches, bn,
            Tensor(arrays[f"domain.{k}.head.weight"], requires_grad=True),
            Tensor(arrays[f"domain.{k}.head.bias"], requires_grad=True))
    return model, meta


def round_to_storage(model: MultiDomainModel) -> None:
    """Round in-memory arrays to what ``save`` would store, so a saved model and its reload agree."""
    for name, arr in model.state_arrays().items():
        if _dtype_for(name) == "float32":
            arr[...] = arr.astype(np.float32)
