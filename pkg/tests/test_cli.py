import json

import numpy as np
import pytest

from clasp.cli import main
from clasp.diagnostics import GradientTrace

SMALL = {
    "batch_size": 8,
    "dino": {"proto_dim": 32, "head_hidden": 32},
    "data": {"n_images": 16, "eval_images": 4},
    "schedule": "clasp",
    "diag_every": 2,
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.mark.parametrize("cmd", ["gen-data", "pseudo-label", "pretrain", "diagnose", "export"])
def test_help(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "Usage" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main(["train"]) == 2
    assert main(["pretrain", "--step", "3"]) == 2
    assert "Did you mean" in capsys.readouterr().err
    assert main(["gen-data"]) == 2  # --out missing


def test_gen_data_and_pseudo_label_reproducible(tmp_path):
    for run in ("a", "b"):
        assert main(["gen-data", "--n", "6", "--seed", "3", "--out", str(tmp_path / run / "img")]) == 0
        assert main(["pseudo-label", "--images", str(tmp_path / run / "img"), "--seed", "3",
                     "--out", str(tmp_path / run / "lab")]) == 0
    for sub in ("img", "lab"):
        a, b = files(tmp_path / "a" / sub), files(tmp_path / "b" / sub)
        assert a == b
    lab = files(tmp_path / "a" / "lab")
    assert {"attributes.jsonl", "rejected.json", "parts.json"} <= set(lab)
    assert any(n.endswith(".pgm") for n in lab)


def test_seed_env_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("CLASP_SEED", "7")
    assert main(["gen-data", "--n", "2", "--out", str(tmp_path / "env")]) == 0
    assert main(["gen-data", "--n", "2", "--seed", "1", "--out", str(tmp_path / "flag")]) == 0
    monkeypatch.delenv("CLASP_SEED")
    assert main(["gen-data", "--n", "2", "--seed", "7", "--out", str(tmp_path / "seven")]) == 0
    assert main(["gen-data", "--n", "2", "--seed", "1", "--out", str(tmp_path / "one")]) == 0
    assert files(tmp_path / "env") == files(tmp_path / "seven")
    assert files(tmp_path / "flag") == files(tmp_path / "one")
    monkeypatch.setenv("CLASP_SEED", "seven")
    assert main(["gen-data", "--n", "2", "--out", str(tmp_path / "bad")]) == 2


def test_pretrain_reproducible_and_export(tmp_path, cfg_file):
    for run in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg_file), "--steps", "4", "--deterministic", "--quiet",
                     "--out", str(tmp_path / run)]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    for name in ("metrics.csv", "summary.json", "checkpoint.ckpt", "trace.json", "config.json"):
        assert a[name] == b[name], name
    assert len(a["metrics.csv"].decode().splitlines()) == 5

    assert main(["export", "--checkpoint", str(tmp_path / "a" / "checkpoint.ckpt"), "--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x" / "metrics.csv").read_bytes() == a["metrics.csv"]


def test_pretrain_warm_start_then_resume(tmp_path, cfg_file):
    stage1 = dict(SMALL, schedule="auto")
    (tmp_path / "s1.json").write_text(json.dumps(stage1))
    assert main(["pretrain", "--config", str(tmp_path / "s1.json"), "--steps", "2", "--deterministic", "--quiet",
                 "--out", str(tmp_path / "s1")]) == 0
    ck = tmp_path / "s1" / "checkpoint.ckpt"
    assert main(["pretrain", "--config", str(tmp_path / "s1.json"), "--steps", "3", "--deterministic", "--quiet",
                 "--warm-start", str(ck), "--out", str(tmp_path / "s2")]) == 0
    rows = (tmp_path / "s2" / "metrics.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[2]) > 0 for r in rows)  # part loss active in stage 2
    assert main(["pretrain", "--config", str(tmp_path / "s1.json"), "--steps", "4", "--deterministic", "--quiet",
                 "--resume", str(ck), "--out", str(tmp_path / "r")]) == 0


def test_pretrain_config_errors(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"stepz": 3}))
    assert main(["pretrain", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    assert "stepz" in capsys.readouterr().err
    (tmp_path / "lr.json").write_text(json.dumps({"lr": -1}))
    assert main(["pretrain", "--config", str(tmp_path / "lr.json"), "--out", str(tmp_path / "o")]) == 2


def test_runtime_failures_exit_1(tmp_path, cfg_file):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert main(["export", "--checkpoint", str(junk), "--out", str(tmp_path / "o")]) == 1
    assert main(["pretrain", "--config", str(cfg_file), "--steps", "1", "--quiet", "--warm-start",
                 str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")]) == 1


def test_diagnose_two_task_trace(tmp_path):
    rng = np.random.default_rng(0)
    tr = GradientTrace(["dino", "part"], ["a", "b", "c"], {t: [rng.normal(size=4) for _ in range(3)] for t in ("dino", "part")})
    tr.save(tmp_path / "trace.json")
    assert main(["diagnose", "--trace", str(tmp_path / "trace.json"), "--out", str(tmp_path / "report.json")]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert 0.0 <= rep["gcr"] <= 1.0 and rep["tasks"] == ["dino", "part"]


def test_diagnose_training_trace(tmp_path, cfg_file):
    assert main(["pretrain", "--config", str(cfg_file), "--steps", "2", "--deterministic", "--quiet",
                 "--out", str(tmp_path / "run")]) == 0
    assert main(["diagnose", "--trace", str(tmp_path / "run" / "trace.json"), "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert set(rep["ead"]["mean"]) == {"dino|part", "dino|attribute", "part|attribute"}


def test_diagnose_malformed_trace(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps({"tasks": ["a", "b"], "layers": ["l"],
                                                 "gradients": {"a": [[1.0, 0.0]], "b": [[1.0]]}}))
    assert main(["diagnose", "--trace", str(tmp_path / "t.json"), "--out", str(tmp_path / "r.json")]) == 1
