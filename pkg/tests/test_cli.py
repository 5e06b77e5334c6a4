import json

import numpy as np
import pytest
import yaml

from budgetprune import checkpoint
from budgetprune.cli import main

SPEC = {"domains": [{"name": "shapes", "generator": "shapes", "n": 40},
                    {"name": "colors", "generator": "colors", "n": 40}]}


@pytest.fixture
def data_dir(tmp_path):
    spec = tmp_path / "suite.yaml"
    spec.write_text(yaml.safe_dump(SPEC))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data"), "--seed", "3"]) == 0
    return tmp_path / "data"


def _train(data_dir, out, *extra):
    return main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2", "--batch-size", "8",
                 "--beta", "0.5", *extra])


def test_gen_data_manifest_hashes_match(data_dir):
    import hashlib
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert len(manifest["files"]) == 6
    for f in manifest["files"]:
        assert hashlib.sha256((data_dir / f["path"]).read_bytes()).hexdigest() == f["sha256"]
    assert sum(f["n"] for f in manifest["files"] if f["domain"] == "shapes") == 40


def test_gen_data_refuses_non_empty_dir(data_dir, capsys):
    assert main(["gen-data", "--out", str(data_dir)]) == 2
    assert "--force" in capsys.readouterr().err


def test_gen_data_default_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BUDGETPRUNE_HOME", str(tmp_path / "home"))
    spec = tmp_path / "s.yaml"
    spec.write_text(yaml.safe_dump({"domains": [{"generator": "colors", "n": 10}]}))
    assert main(["gen-data", "--spec", str(spec)]) == 0
    assert (tmp_path / "home" / "data" / "manifest.json").is_file()


def test_user_errors_exit_2(tmp_path, data_dir, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2
    assert "nowhere" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--beta", "2"]) == 2
    assert main(["prune", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epoch: 3}\n")
    assert main(["train", "--config", str(bad), "--data", str(data_dir)]) == 2


def test_tampered_dataset_exit_2(tmp_path, data_dir):
    f = data_dir / "colors" / "train.mdds"
    f.write_bytes(f.read_bytes()[:-1] + b"\x01")
    assert _train(data_dir, tmp_path / "run") == 2


def test_end_to_end_pipeline(tmp_path, data_dir, capsys):
    run = tmp_path / "run"
    assert _train(data_dir, run) == 0
    for name in ("config.json", "train.jsonl", "summary.json", "checkpoint/meta.json"):
        assert (run / name).is_file()
    assert main(["prune", str(run / "checkpoint")]) == 0
    assert (run / "pruned" / "prune_report.json").is_file()
    meta = checkpoint.read_meta(run / "pruned")
    assert "origin_input_channels" in meta["extra"]
    for ck in ("checkpoint", "pruned"):
        assert main(["eval", str(run / ck), "--data", str(data_dir)]) == 0
    full = json.loads((run / "eval_checkpoint_test.json").read_text())
    pruned = json.loads((run / "eval_pruned_test.json").read_text())
    assert full["accuracy"] == pruned["accuracy"]
    assert full["beta"] == 0.5
    assert pruned["cost"]["mac_ratio"] == pytest.approx(full["cost"]["mac_ratio"])

    baseline = tmp_path / "baseline.json"
    baseline.write_text(json.dumps({"shapes": 0.5, "colors": 0.3}))
    capsys.readouterr()
    assert main(["score", str(run / "eval_pruned_test.json"), "--baseline", str(baseline)]) == 0
    assert main(["score", str(run / "eval_checkpoint_test.json"), "--baseline", str(baseline)]) == 0
    rows = (run / "scores.csv").read_text().splitlines()
    assert rows[0] == ("schema_version,beta,lambda_ps,seed,acc_colors,acc_shapes,mac_ratio,param_ratio,"
                       "S,S_O,S_P")
    assert len(rows) == 3 and rows[1].split(",")[:4] == ["1", "0.5", "1.0", "0"]
    assert "S_O" in capsys.readouterr().out

    assert main(["eval", str(run / "pruned"), "--data", str(data_dir), "--domain", "zebra"]) == 2
    assert main(["eval", str(run / "pruned"), "--data", str(data_dir), "--domain", "colors",
                 "--out", str(tmp_path / "one.json")]) == 0
    assert list(json.loads((tmp_path / "one.json").read_text())["accuracy"]) == ["colors"]


def test_score_perfect_baseline_errors(tmp_path):
    ev = tmp_path / "eval.json"
    cost = {"macs": {"a": 10}, "mac_ratio_per_domain": {"a": 0.5}, "mac_ratio": 0.5, "structural_mac_ratio": 0.5,
            "param_bytes": 100, "param_ratio": 0.8, "accuracy": {"a": 0.8}, "s": None, "s_o": None, "s_p": None}
    ev.write_text(json.dumps({"accuracy": {"a": 0.8}, "cost": cost, "beta": 0.5, "lambda_ps": 1.0, "seed": 0}))
    base = tmp_path / "b.json"
    base.write_text(json.dumps({"a": 0.1}))  # Err_max = 0.2 = the model's error
    assert main(["score", str(ev), "--baseline", str(base), "--csv", str(tmp_path / "s.csv")]) == 0
    row = (tmp_path / "s.csv").read_text().splitlines()[1].split(",")
    assert float(row[-3]) == 0.0


def test_train_is_deterministic_byte_for_byte(tmp_path, data_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(data_dir, a, "--checkpoint-every-round") == 0
    assert _train(data_dir, b, "--checkpoint-every-round") == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    # config.json records the output path, which differs by construction
    differing = [f.as_posix() for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    assert set(differing) <= {"config.json"}


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--repeats", "1"]) == 0
    assert "0 failed" in capsys.readouterr().out


def test_config_file_with_flag_override(tmp_path, data_dir):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(data_dir), "train": {"beta": 0.75, "epochs": 1, "batch_size": 8}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--beta", "0.6"]) == 0
    echo = json.loads((tmp_path / "r" / "config.json").read_text())
    assert echo["train"]["beta"] == 0.6 and echo["train"]["epochs"] == 1
