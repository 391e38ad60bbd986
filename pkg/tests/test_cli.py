import json
import subprocess
import sys

import pytest

from unoise.cli import main

TINY = ["--n", "10", "--image-size", "24", "--n-distractors", "1", "--landmark-size", "4",
        "--blob-size", "4", "--offset", "0", "8"]


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", *TINY, "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train-utility", "--data", str(root / "data"), "--depth", "1", "--base-channels", "2",
                 "--epochs", "1", "--batch-size", "4", "--out", str(root / "utility")]) == 0
    assert main(["train-noise", "--data", str(root / "data"),
                 "--utility-ckpt", str(root / "utility" / "utility.ckpt"), "--depth", "1",
                 "--base-channels", "2", "--epochs", "1", "--batch-size", "4",
                 "--out", str(root / "noise")]) == 0
    return root


def test_synth_data_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth-data", *TINY, "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["seed"] == 5 and cfg["task"]["image_size"] == 24


def test_pipeline_outputs(pipeline):
    assert {"utility.ckpt", "metrics.csv", "config.json"} <= set(_files(pipeline / "utility"))
    header = (pipeline / "noise" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,utility_loss,noise_term,mean_B,val_dice"
    cfg = json.loads((pipeline / "noise" / "config.json").read_text())
    assert cfg["training"]["epochs"] == 1 and cfg["model"]["depth"] == 1 and cfg["preset"] == "medium"


def test_evaluate_and_interpret(pipeline, tmp_path):
    u, n = str(pipeline / "utility" / "utility.ckpt"), str(pipeline / "noise" / "noise.ckpt")
    assert main(["evaluate", "--data", str(pipeline / "data"), "--utility-ckpt", u,
                 "--noise-ckpt", n, "--thresholds", "0", "0.5", "1", "--out", str(tmp_path / "ev")]) == 0
    assert len((tmp_path / "ev" / "sweep.csv").read_text().splitlines()) == 4
    for method in ("unoise", "occlusion", "gradcam"):
        out = tmp_path / method
        assert main(["interpret", "--data", str(pipeline / "data"), "--method", method,
                     "--utility-ckpt", u, "--noise-ckpt", n, "--window", "5", "--out", str(out)]) == 0
        names = set(_files(out))
        assert any(s.endswith(".pgm") for s in names) and any(s.endswith(".npy") for s in names)


def test_benchmark_writes_table(pipeline, tmp_path):
    assert main(["benchmark", "--data", str(pipeline / "data"),
                 "--utility-ckpt", str(pipeline / "utility" / "utility.ckpt"),
                 "--noise-ckpt", str(pipeline / "noise" / "noise.ckpt"),
                 "--trials", "1", "--window", "5", "--out", str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "benchmark.csv").read_text().splitlines()
    assert len(lines) == 4


def test_missing_required_flag_exits_2(pipeline, capsys):
    assert main(["train-noise", "--data", str(pipeline / "data")]) == 2
    err = capsys.readouterr().err
    assert "--utility-ckpt" in err and len(err.strip().splitlines()) == 1


def test_unreadable_path_exits_2(tmp_path, capsys):
    assert main(["train-utility", "--data", str(tmp_path / "missing")]) == 2
    assert "missing" in capsys.readouterr().err


def test_interpret_needs_matching_checkpoint(pipeline, tmp_path):
    assert main(["interpret", "--data", str(pipeline / "data"), "--method", "unoise",
                 "--out", str(tmp_path / "x")]) == 2


def test_runtime_failure_exits_1_and_leaves_no_output(pipeline, tmp_path, capsys):
    # a utility checkpoint is not a single-logit noise model
    out = tmp_path / "bad"
    assert main(["interpret", "--data", str(pipeline / "data"), "--method", "unoise",
                 "--noise-ckpt", str(pipeline / "utility" / "utility.ckpt"), "--out", str(out)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("unoise: error: ValueError") and "\n" not in err
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".bad")]


def test_failed_run_keeps_previous_output(pipeline, tmp_path):
    out = tmp_path / "keep"
    assert main(["synth-data", *TINY, "--out", str(out)]) == 0
    before = _files(out)
    assert main(["synth-data", *TINY[:-3], "--offset", "0", "60", "--out", str(out)]) == 1
    assert _files(out) == before


def test_default_out_uses_env(tmp_path, monkeypatch):
    monkeypatch.setenv("UNOISE_OUT", str(tmp_path / "runs"))
    assert main(["synth-data", *TINY]) == 0
    assert (tmp_path / "runs" / "synth-data" / "manifest.json").is_file()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "unoise.cli", "synth-data", "--n", "0",
                          "--out", str(tmp_path / "z")], capture_output=True, text=True)
    assert res.returncode == 1 and res.stderr.startswith("unoise: error:")
    res = subprocess.run([sys.executable, "-m", "unoise.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-noise" in res.stdout
