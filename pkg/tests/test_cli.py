import json
import subprocess
import sys

import numpy as np
import pytest

from camkit.cli import main
from camkit.config import ConfigError, load_config, parse_config_text
from camkit.data import MetadataRecord, read_metadata, write_metadata
from camkit.evaluation import EmbeddingMatrix, write_cemb

TINY = ["--image-size", "16", "--epochs", "1", "--batch-size", "16",
        "--set", "model.out_channels=8", "--set", "model.widths=8,16,16", "--set", "model.embed_dim=16"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_twice_is_byte_identical(tmp_path, capsys):
    args = ["--seed", "7", "--image-size", "12", "--train-per-class", "3", "--test-per-class", "2"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert "raw-pixel 1-NN" in capsys.readouterr().out


def test_check_flags_overlapping_splits(tmp_path, capsys, small_corpus):
    recs = read_metadata(small_corpus[0] / "metadata.csv")
    assert main(["check", "--meta", str(small_corpus[0] / "metadata.csv")]) == 0
    leak = MetadataRecord(recs[0].image_id, recs[0].path, "SYNTH-WTC", recs[0].label, "W1", 3)
    write_metadata(tmp_path / "bad.csv", recs + [leak])
    capsys.readouterr()
    assert main(["check", "--meta", str(tmp_path / "bad.csv")]) == 1
    out = capsys.readouterr().out
    assert "duplicate-id" in out and recs[0].image_id in out


def test_eval_writes_report_and_prints_cps(tmp_path, capsys, small_corpus):
    meta = small_corpus[0] / "metadata.csv"
    recs = read_metadata(meta)
    classes = sorted({r.label for r in recs})
    data = np.array([np.eye(len(classes))[classes.index(r.label)] + 0.01 for r in recs])
    write_cemb(tmp_path / "e.cemb", EmbeddingMatrix(data, [r.image_id for r in recs]))
    out = tmp_path / "report.json"
    assert main(["eval", "--embeddings", str(tmp_path / "e.cemb"), "--meta", str(meta), "--tasks", "chammi",
                 "--out", str(out), "--radar", str(tmp_path / "r.svg")]) == 0
    printed = capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert "CPS: 1.0000" in printed and doc["cps"] == 1.0
    assert set(doc["task_f1"]) == {"W1", "W2", "H1", "H2", "H3", "C1", "C2", "C3", "C4"}
    assert (tmp_path / "r.svg").read_text().startswith("<svg")
    assert main(["report", "--report", str(out)]) == 0


def test_usage_errors_exit_64(capsys):
    assert main(["frobnicate"]) == 64
    assert main(["check", "--meta", "x.csv", "--bogus"]) == 64
    assert main([]) == 64
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path, small_corpus):
    assert main(["train", "--data", str(small_corpus[0]), "--out", str(tmp_path), "--model.nonsense", "3"]) == 64


def test_runtime_and_validation_exit_codes(tmp_path):
    assert main(["check", "--meta", str(tmp_path / "missing.csv")]) == 2
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--lr", "-1"]) == 1


def test_train_embed_eval_round_trip(tmp_path, small_corpus, capsys):
    data = str(small_corpus[0])
    run = tmp_path / "run"
    assert main(["train", "--data", data, "--out", str(run), "--strategy", "hypernet", "--deterministic",
                 "--model.hyper_hidden", "4", *TINY]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["model"]["hyper_hidden"] == 4 and manifest["config"]["deterministic"] is True
    assert main(["embed", "--data", data, "--run", str(run), "--out", str(tmp_path / "e.cemb")]) == 0
    assert main(["eval", "--embeddings", str(tmp_path / "e.cemb"), "--meta", data + "/metadata.csv",
                 "--out", str(tmp_path / "r.json"), "--deterministic"]) == 0
    assert "CPS:" in capsys.readouterr().out


def test_config_file_and_flag_precedence(tmp_path, small_corpus):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# desk run\nstrategy = slice_param\nepochs = 3\n[model]\nembed_dim = 12\n")
    run = tmp_path / "run"
    assert main(["train", "--data", str(small_corpus[0]), "--out", str(run), "--config", str(cfg),
                 *TINY]) == 0
    c = json.loads((run / "manifest.json").read_text())["config"]
    assert c["strategy"] == "slice_param" and c["epochs"] == 1 and c["model"]["embed_dim"] == 16


def test_config_parsing():
    flat = parse_config_text("a = 1\nb = 2.5  # note\n[loss]\nalpha = 0.2\nname = \"x y\"\nflag = true\nw = 1,2,3\n")
    assert flat == {"a": 1, "b": 2.5, "loss.alpha": 0.2, "loss.name": "x y", "loss.flag": True, "loss.w": (1, 2, 3)}
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "camkit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout
