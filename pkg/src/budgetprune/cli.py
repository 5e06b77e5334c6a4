"""``budgetprune`` command line: gen-data, train, prune, eval, score, gradcheck.

Exit codes: 0 success, 1 internal failure, 2 user or configuration error.
Outputs default to directories under ``$BUDGETPRUNE_HOME`` (``./runs`` when
unset).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import checkpoint, metrics, pruner
from .architecture import Architecture, DescriptorError, micronet
from .datakit import DEFAULT_SUITE, DatasetError, generate_synthetic_suite, load_idx_like, save_idx_like
from .gradcheck import TOLERANCE, run_suite
from .model import UnknownDomainError, build_from_descriptor
from .trainer import TrainConfig, TrainingDiverged, evaluate, pretrain_backbone, train

HOME_ENV = "BUDGETPRUNE_HOME"
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")

log = logging.getLogger("budgetprune")


class UserError(Exception):
    """Bad input from the user; reported with exit code 2."""


def output_root() -> Path:
    return Path(os.environ.get(HOME_ENV, "runs"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UserError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- datasets ----------------------------------------------------------------------

def load_data_dir(path, split: str | None = None) -> dict:
    """Read a gen-data directory: ``{domain: {split: dataset}}`` in manifest order."""
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise UserError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    data: dict = {}
    for entry in manifest["files"]:
        if split is not None and entry["split"] != split:
            continue
        f = root / entry["path"]
        if not f.is_file():
            raise UserError(f"dataset file {f} listed in the manifest is missing")
        if _sha256(f) != entry["sha256"]:
            raise UserError(f"dataset file {f} does not match its manifest hash")
        data.setdefault(entry["domain"], {})[entry["split"]] = load_idx_like(f)
    return data


def cmd_gen_data(args) -> int:
    spec = DEFAULT_SUITE
    if args.spec:
        spec = yaml.safe_load(Path(args.spec).read_text())
    out = _prepare_out(Path(args.out) if args.out else output_root() / "data", args.force)
    suite = generate_synthetic_suite(args.seed, spec)
    files = []
    for splits in suite:
        for split in SPLITS:
            ds = splits[split]
            rel = Path(ds.name) / f"{split}.mdds"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            save_idx_like(ds, out / rel)
            files.append({"path": rel.as_posix(), "domain": ds.name, "split": split, "n": len(ds),
                          "classes": ds.num_classes, "sha256": _sha256(out / rel)})
    _write_json(out / MANIFEST, {"seed": args.seed, "spec": spec, "files": files})
    for f in files:
        print(f"{f['path']:<24} n={f['n']:<5} {f['sha256'][:16]}")
    print(f"wrote {len(files)} files to {out}")
    return 0


# -- training ----------------------------------------------------------------------

@dataclass
class RunConfig:
    data: str | None = None
    arch: str = "micronet"
    out: str | None = None
    switch_mode: str = "ste"
    checkpoint_every_round: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: dict | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise UserError(f"unknown config keys {sorted(unknown)}")
        try:
            doc["train"] = TrainConfig.from_dict(doc.get("train") or {})
        except (TypeError, ValueError) as exc:
            raise UserError(f"invalid training options: {exc}") from None
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


TRAIN_FLAGS = {
    "beta": float, "lambda_ps": float, "epochs": int, "batch_size": int, "classifier_lr": float,
    "mask_lr": float, "lambda_lr": float, "seed": int,
}


def _load_arch(spec: str) -> Architecture:
    if spec == "micronet":
        return micronet()
    path = Path(spec)
    if not path.is_file():
        raise UserError(f"architecture descriptor {path} not found")
    return Architecture.load(path)


def resolve_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file {path} not found")
        doc = yaml.safe_load(path.read_text()) or {}
    cfg = RunConfig.from_dict(doc)
    for name in ("data", "arch", "out"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.checkpoint_every_round:
        cfg.checkpoint_every_round = True
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k) is not None}
    if overrides:
        try:
            cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **overrides})
        except ValueError as exc:
            raise UserError(f"invalid training options: {exc}") from None
    if cfg.data is None:
        raise UserError("no dataset directory given (config 'data' or --data)")
    if cfg.out is None:
        cfg.out = str(output_root() / f"train-beta{cfg.train.beta:g}-lps{cfg.train.lambda_ps:g}-seed{cfg.train.seed}")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not Path(cfg.data).is_dir():
        raise UserError(f"dataset directory {cfg.data} does not exist")
    data = load_data_dir(cfg.data)
    arch = _load_arch(cfg.arch)
    out = _prepare_out(Path(cfg.out), args.force)
    _write_json(out / "config.json", cfg.to_dict())
    domains = [(name, splits["train"].num_classes) for name, splits in data.items()]
    model = build_from_descriptor(arch, domains, seed=cfg.train.seed, switch_mode=cfg.switch_mode)
    if cfg.pretrain:
        opts = dict(cfg.pretrain)
        source_path = Path(opts.pop("data", ""))
        if not source_path.is_file():
            raise UserError(f"pretraining source {source_path} not found")
        loss, _ = pretrain_backbone(model, load_idx_like(source_path), seed=cfg.train.seed, **opts)
        checkpoint.round_to_storage(model)
        print(f"pretrained backbone, final loss {loss:.4f}")

    def on_round(epoch, m, history):
        r = history.rounds[-1]
        active = " ".join(f"{k}={v:.3f}" for k, v in r["active"].items())
        print(f"round {epoch}: active {active} intersection={r['intersection']:.3f}")
        if cfg.checkpoint_every_round:
            checkpoint.save(m, out / "rounds" / f"round_{epoch:03d}", extra={"round": epoch})

    try:
        model, history, budget = train(model, data, cfg.train, log_path=out / "train.jsonl", on_round=on_round)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    checkpoint.round_to_storage(model)
    summary = {"final_round": history.rounds[-1], "lambda": budget.lambdas,
               "val_accuracy": {n: evaluate(model, s["val"]) for n, s in data.items() if "val" in s}}
    checkpoint.save(model, out / "checkpoint", extra={"train": cfg.train.to_dict(), "summary": summary})
    _write_json(out / "summary.json", summary)
    print(f"checkpoint written to {out / 'checkpoint'}")
    return 0


# -- prune / eval / score ------------------------------------------------------------

def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise UserError(str(exc)) from None


def cmd_prune(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    try:
        compact, report = pruner.prune(model, cascade=args.cascade, n_verify=args.n_verify)
    except pruner.PruneError as exc:
        raise UserError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "pruned"
    origin_map = {str(i): compact.arch.origin_input_channels(i) for i in compact.arch.masked_layers}
    extra = dict(meta.get("extra", {}))
    extra.update({"prune": report.to_dict(), "origin_input_channels": origin_map})
    checkpoint.save(compact, out, extra=extra)
    (out / "prune_report.json").write_text(report.to_json() + "\n")
    print(report.table())
    print(f"compact checkpoint written to {out}")
    return 0


def cmd_eval(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    data = load_data_dir(args.data, split=args.split)
    names = args.domain or model.domain_names
    for name in names:
        model.domain(name)
        if name not in data:
            raise UserError(f"no {args.split} split for domain {name!r} in {args.data}")
    accuracy = {n: evaluate(model, data[n][args.split], n, batch_size=args.batch_size) for n in names}
    cost = metrics.cost_report(model, accuracy)
    train_cfg = meta.get("extra", {}).get("train", {})
    doc = {"checkpoint": str(args.checkpoint), "split": args.split, "accuracy": accuracy,
           "cost": cost.to_dict(), "beta": train_cfg.get("beta"), "lambda_ps": train_cfg.get("lambda_ps"),
           "seed": meta.get("seed")}
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{ckpt.name}_{args.split}.json"
    _write_json(out, doc)
    for n, a in accuracy.items():
        print(f"{n:<12} {a:.4f}")
    print(f"MAC ratio {cost.mac_ratio:.4f}  param ratio {cost.param_ratio:.4f}")
    return 0


def _read_errors(path) -> dict[str, float]:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"baseline file {p} not found")
    doc = json.loads(p.read_text())
    if "accuracy" in doc:
        return {d: 1.0 - a for d, a in doc["accuracy"].items()}
    return {d: float(e) for d, e in doc.items()}


def cmd_score(args) -> int:
    p = Path(args.eval)
    if not p.is_file():
        raise UserError(f"evaluation file {p} not found")
    doc = json.loads(p.read_text())
    baseline = _read_errors(args.baseline)
    missing = set(doc["accuracy"]) - set(baseline)
    if missing:
        raise UserError(f"no baseline error for domains {sorted(missing)}")
    try:
        cfg = metrics.SScoreConfig.from_baseline({d: baseline[d] for d in doc["accuracy"]}, args.gamma, args.factor)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    report = metrics.CostReport(**doc["cost"]).with_scores(cfg)
    print(f"S = {report.s:.1f}  S_O = {report.s_o:.1f}  S_P = {report.s_p:.1f}")
    beta = doc.get("beta") if args.beta is None else args.beta
    lps = doc.get("lambda_ps") if args.lambda_ps is None else args.lambda_ps
    out = Path(args.csv) if args.csv else p.with_name("scores.csv")
    row = metrics.csv_row(report, beta, lps, doc.get("seed"), header=not out.exists())
    with open(out, "a") as fh:
        fh.write(row)
    print(row.strip().splitlines()[-1])
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(repeats=args.repeats, seed=args.seed, tolerance=args.tolerance)
    for r in results:
        if args.list_all or not r.passed:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<28} rel_error={r.rel_error:.2e}")
    worst = max(r.rel_error for r in results)
    failed = sum(not r.passed for r in results)
    print(f"{len(results)} cases, max relative error {worst:.3e}, {failed} failed (tolerance {args.tolerance:g})")
    return 0 if failed == 0 else 1


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-domain suite")
    p.add_argument("--spec", help="YAML suite spec (default: the built-in four-domain suite)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train switches, BN and heads of every domain")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--arch", help="'micronet' or a descriptor path")
    p.add_argument("--out", help="run directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    p.add_argument("--checkpoint-every-round", action="store_true")
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="remove kernel slices no domain uses")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="compact checkpoint directory (default: <run>/pruned)")
    p.add_argument("--cascade", action="store_true", help="also remove producer filters nobody reads")
    p.add_argument("--n-verify", type=int, default=64, help="random inputs for the equivalence check")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="per-domain accuracy and cost ratios")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--domain", action="append", help="restrict to a domain (repeatable)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", help="output JSON (default: eval_<checkpoint>_<split>.json beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="S, S_O, S_P from an eval file and baseline errors")
    p.add_argument("eval", help="JSON written by the eval command")
    p.add_argument("--baseline", required=True,
                   help="JSON mapping domain to baseline error, or an eval file of the baseline model")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--factor", type=float, default=2.0, help="Err_max = factor * baseline error")
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda-ps", type=float, dest="lambda_ps")
    p.add_argument("--csv", help="CSV file to append the score row to")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.add_argument("--list", action="store_true", dest="list_all", help="print every case, not only failures")
    p.set_defaults(func=cmd_gradcheck)
    return parser


USER_ERRORS = (UserError, DatasetError, DescriptorError, UnknownDomainError, FileNotFoundError, yaml.YAMLError,
               json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any internal failure as exit 1
        log.exception("internal failure")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
