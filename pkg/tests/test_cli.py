import json
import subprocess
import sys

import numpy as np
import pytest

from actrec3d.cli import run_cli
from actrec3d.data import encode_rvid, load_clip, load_manifest
from actrec3d.model_io import load_archive
from actrec3d.train_eval import predict
from actrec3d.vision import Clip


def tiny_data(tmp_path):
    out = tmp_path / "data"
    assert run_cli(["synth-data", "--out", str(out), "--clips-per-class", "4", "--frames", "8",
                    "--height", "12", "--width", "12", "--seed", "1"]) == 0
    return out


def train_args(data, out, *extra):
    return ["train", "--manifest", str(data / "manifest.txt"), "--out", str(out),
            "--config", str(data / "train_config.json"), "--size", "8", "--epochs", "2",
            "--batch-size", "8", *extra]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = tiny_data(root)
    assert run_cli(train_args(data, root / "run")) == 0
    return data, root / "run"


def test_synth_data_outputs(tmp_path, capsys):
    data = tiny_data(tmp_path)
    listed = json.loads((data / "artifacts.json").read_text())["files"]
    assert "manifest.txt" in listed and "train_config.json" in listed
    assert sum(f.endswith(".rvid") for f in listed) == 24
    pre = json.loads((data / "train_config.json").read_text())["preprocess"]
    assert pre["N"] == 8 and pre["S"] == 1.0 and pre["size"] == [12, 12]
    assert "resolved config" in capsys.readouterr().err


def test_train_artifacts(trained):
    _, run = trained
    listed = json.loads((run / "artifacts.json").read_text())["files"]
    assert set(listed) == {"history.csv", "config.json", "model.ar3d", "model_best.ar3d"}
    assert len((run / "history.csv").read_text().splitlines()) == 3
    arc = load_archive(run / "model.ar3d")
    assert arc.preprocess.size == (8, 8) and arc.preprocess.N == 8
    assert load_archive(run / "model_best.ar3d").meta["checkpoint"] == "best_val_loss"


def test_train_twice_identical_history(tmp_path, trained):
    data, run = trained
    assert run_cli(train_args(data, tmp_path / "again")) == 0
    assert (tmp_path / "again" / "history.csv").read_bytes() == (run / "history.csv").read_bytes()


def test_flags_override_config(tmp_path, trained, capsys):
    data, _ = trained
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "seed": 3, "preprocess": {"S": 1.0, "N": 8}}))
    args = ["train", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "o"),
            "--config", str(cfg), "--epochs", "1", "--size", "8", "--no-bg-sub"]
    assert run_cli(args) == 0
    resolved = json.loads(capsys.readouterr().err.split("resolved config: ")[1].splitlines()[0])
    assert resolved["epochs"] == 1 and resolved["seed"] == 3
    assert resolved["preprocess"]["bg_sub"] is False and resolved["preprocess"]["N"] == 8


def test_eval(trained, tmp_path, capsys):
    data, run = trained
    assert run_cli(["eval", "--archive", str(run / "model.ar3d"), "--manifest",
                    str(data / "manifest.txt"), "--out", str(tmp_path), "--reference",
                    "kth"]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["total"] == 6
    rows = (tmp_path / "confusion.csv").read_text().splitlines()
    assert len(rows) == 7
    assert "published 0.8400" in capsys.readouterr().out


def test_predict_matches_library(trained, tmp_path):
    data, run = trained
    m = load_manifest(data / "manifest.txt")
    clip_path = m.resolve(m.split("test")[0])
    assert run_cli(["predict", "--archive", str(run / "model.ar3d"), "--clip", str(clip_path),
                    "--out", str(tmp_path)]) == 0
    got = json.loads((tmp_path / "prediction.json").read_text())
    arc = load_archive(run / "model.ar3d")
    k, name, probs = predict(arc.spec, arc.params, load_clip(clip_path), arc.preprocess,
                             arc.classes)
    assert got["class_index"] == k and got["class"] == name
    assert np.array(got["probs"]).tobytes() == probs.tobytes()


def test_predict_too_short_exit_2(trained, tmp_path, capsys):
    _, run = trained
    short = tmp_path / "short.rvid"
    short.write_bytes(encode_rvid(Clip(np.zeros((3, 12, 12)), 8.0)))
    code = run_cli(["predict", "--archive", str(run / "model.ar3d"), "--clip", str(short),
                    "--out", str(tmp_path / "o")])
    assert code == 2
    assert "8 frames" in capsys.readouterr().err


def test_preprocess_command(trained, tmp_path):
    data, run = trained
    m = load_manifest(data / "manifest.txt")
    clip_path = m.resolve(m.entries[0])
    assert run_cli(["preprocess", "--clip", str(clip_path), "--archive", str(run / "model.ar3d"),
                    "--out", str(tmp_path)]) == 0
    assert np.load(tmp_path / "preprocessed.npy").shape == (1, 8, 8, 8)


def test_resolution_study_command(trained, tmp_path):
    data, _ = trained
    args = train_args(data, tmp_path, "--epochs", "1")
    args[0] = "resolution-study"
    assert run_cli(args + ["--sizes", "8", "12"]) == 0
    lines = (tmp_path / "resolution.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["8x8", "12x12"]


def test_watch_command(trained, tmp_path):
    data, run = trained
    inbox = tmp_path / "in"
    inbox.mkdir()
    m = load_manifest(data / "manifest.txt")
    (inbox / "a.rvid").write_bytes(m.resolve(m.entries[0]).read_bytes())
    assert run_cli(["watch", "--input", str(inbox), "--archive", str(run / "model.ar3d"),
                    "--poll-ms", "10", "--max-events", "1", "--timeout", "10",
                    "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "events.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["clip"] == "a.rvid"


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train"],  # --manifest missing
    ["train", "--manifest", "m.txt", "--bogus"],
    ["train", "--manifest", "m.txt", "--model", "7"],
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert run_cli(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_file_exit_1(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    assert run_cli(["train", "--manifest", "m.txt", "--config", str(tmp_path / "c.json"),
                    "--out", str(tmp_path)]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert run_cli(["train", "--manifest", str(tmp_path / "missing.txt"),
                    "--out", str(tmp_path)]) == 2
    assert run_cli(["predict", "--archive", str(tmp_path / "none.ar3d"), "--clip", "x",
                    "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_help_documents_defaults(capsys):
    assert run_cli(["train", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())  # undo argparse wrapping
    for needle in ("default 50", "default 16", "default 1e-3", "nadam", "0.01 for model 4",
                   "S=7 N=35", "dropout 0.5"):
        assert needle in text


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "actrec3d.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "synth-data" in out.stdout


@pytest.mark.slow
def test_synth_train_eval_pipeline(tmp_path):
    data = tmp_path / "data"
    assert run_cli(["synth-data", "--classes", "6", "--seed", "1", "--out", str(data)]) == 0
    assert run_cli(["train", "--manifest", str(data / "manifest.txt"), "--config",
                    str(data / "train_config.json"), "--model", "3", "--epochs", "12",
                    "--out", str(tmp_path / "run")]) == 0
    assert run_cli(["eval", "--archive", str(tmp_path / "run" / "model.ar3d"), "--manifest",
                    str(data / "manifest.txt"), "--out", str(tmp_path / "ev")]) == 0
    acc = json.loads((tmp_path / "ev" / "metrics.json").read_text())["accuracy"]
    print(f"cli pipeline test accuracy {acc:.4f}")
    assert acc >= 0.90
