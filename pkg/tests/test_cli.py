import csv
import json

import pytest

from eegmoe.cli import main
from eegmoe.training import RunConfig

FAST = {"variant": "tiny", "gumbel_k": 4, "batch_size": 4, "epochs": 1, "steps_per_epoch": 2, "lr": 1e-3,
        "n_checkpoints": 2, "probe_per_paradigm": 3}


def _files(manifest_path):
    return json.loads(manifest_path.read_text())["files"]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth-data" in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["pretrain", "--corpus", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_invalid_config_field_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": -1}))
    assert main(["pretrain", "--corpus", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 1
    assert "run.lr" in capsys.readouterr().err


def test_synth_data_manifest_and_rerun_hashes(tmp_path, monkeypatch):
    monkeypatch.setenv("EEGMOE_RUN_ROOT", str(tmp_path))
    args = ["synth-data", "--n-per-paradigm", "4", "--n-patches", "2", "--seed", "3"]
    assert main(args + ["--out", "a"]) == 0
    assert main(args + ["--out", "b"]) == 0
    fa, fb = _files(tmp_path / "a" / "manifest.json"), _files(tmp_path / "b" / "manifest.json")
    assert fa == fb and fa
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seeds"] == {"corpus": 3} and len(m["config_hash"]) == 64


def test_report_on_empty_run_is_header_only(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == 0
    assert (tmp_path / "results.csv").read_text().count("\n") == 1


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict({**FAST, "phase": "pretrain"})
    text = json.dumps(cfg.to_dict(), sort_keys=True)
    again = RunConfig.from_dict(json.loads(text))
    assert json.dumps(again.to_dict(), sort_keys=True) == text


def test_smoke_pipeline(tmp_path):
    cfg = tmp_path / "fast.json"
    cfg.write_text(json.dumps(FAST))
    corpus = str(tmp_path / "corpus")
    assert main(["synth-data", "--out", corpus, "--n-per-paradigm", "16", "--n-patches", "2"]) == 0
    assert main(["pretrain-pilot", "--corpus", corpus, "--out", str(tmp_path / "pilot"), "--config", str(cfg)]) == 0
    assert main(["cka-calibrate", "--pilot", str(tmp_path / "pilot"), "--corpus", corpus,
                 "--out", str(tmp_path / "cal"), "--n-experts", "4", "--rho-min", "0.5", "--rho-max", "1.0"]) == 0
    alloc = json.loads((tmp_path / "cal" / "allocation.json").read_text())
    assert len(alloc["layers"]) == 4
    assert main(["pretrain", "--corpus", corpus, "--allocation", str(tmp_path / "cal" / "allocation.json"),
                 "--out", str(tmp_path / "pre"), "--config", str(cfg)]) == 0
    ft_cfg = tmp_path / "ft.json"
    ft_cfg.write_text(json.dumps({**FAST, "epochs": 2, "frozen_epochs": 1, "warmup_epochs": 1}))
    assert main(["finetune", "--corpus", corpus, "--ckpt", str(tmp_path / "pre" / "pretrain.ckpt"),
                 "--out", str(tmp_path / "ft"), "--config", str(ft_cfg)]) == 0
    assert main(["analyze-gradients", "--ckpt", str(tmp_path / "ft" / "finetune.ckpt"), "--corpus", corpus,
                 "--steps", "3", "--rank", "2", "--out", str(tmp_path / "grad")]) == 0
    for name in ("cosine.csv", "affinity.csv", "routing.csv"):
        assert (tmp_path / "grad" / name).read_text().count("\n") == 4
    assert main(["attribute", "--ckpt", str(tmp_path / "ft" / "finetune.ckpt"), "--corpus", corpus,
                 "--task", "0", "--split", "train", "--n-samples", "1", "--steps", "4",
                 "--out", str(tmp_path / "att")]) == 0
    head = (tmp_path / "att" / "attribution.csv").read_text().splitlines()[0]
    assert head == "group_name,path,score,rank"

    assert main(["report", "--run", str(tmp_path / "ft")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ft" / "results.csv")))
    metrics = json.loads((tmp_path / "ft" / "metrics.json").read_text())
    assert len(rows) == len(metrics["tasks"]) == 3
    for r in rows:
        assert float(r["balanced_accuracy"]) == metrics["tasks"][r["task"]]["test"]["balanced_accuracy"]
    for d in ("pilot", "cal", "pre", "ft", "grad", "att"):
        assert (tmp_path / d / "manifest.json").exists()


def test_failed_command_removes_partial_output(tmp_path):
    out = tmp_path / "pilot"
    assert main(["pretrain-pilot", "--corpus", str(tmp_path / "missing"), "--out", str(out)]) == 1
    assert not out.exists()
