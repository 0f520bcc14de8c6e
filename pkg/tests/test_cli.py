import hashlib
import json
import subprocess
import sys

import pytest

from protomil.cli import main


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps({"n_classes": 3, "dim": 6, "n_slides_per_class": 3,
                                                 "n_test_slides_per_class": 1, "instances_min": 4,
                                                 "instances_max": 8}))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "data")]) == 0
    train = {"model": "mbdsmil_cl_pl", "epochs": 2, "warmup_epochs": 1, "q_dim": 4, "e_dim": 8, "folds": 3,
             "queue_capacity": 32, "manifest": str(root / "data" / "manifest.json")}
    (root / "train.json").write_text(json.dumps(train))
    return root


def test_synth_writes_dataset_and_config(dataset):
    data = dataset / "data"
    assert (data / "manifest.json").exists() and (data / "synth_config.json").exists()
    resolved = json.loads((data / "resolved_config.json").read_text())
    assert resolved["class_separation"] == 6.0 and resolved["n_classes"] == 3


def test_synth_seed_override(tmp_path, dataset):
    assert main(["synth", "--config", str(dataset / "synth.json"), "--out", str(tmp_path), "--seed", "42"]) == 0
    assert json.loads((tmp_path / "resolved_config.json").read_text())["seed"] == 42


def test_cv_produces_checkpoints_and_summary(dataset, tmp_path):
    before = _digest(dataset / "data")
    assert main(["cv", "--config", str(dataset / "train.json"), "--out", str(tmp_path / "exp1")]) == 0
    for k in range(3):
        assert (tmp_path / "exp1" / f"fold_{k}" / "checkpoint" / "checkpoint.milw").exists()
    summary = json.loads((tmp_path / "exp1" / "summary.json").read_text())
    assert summary["folds"] == 3 and "slide_macro_f1" in summary["metrics"]
    assert _digest(dataset / "data") == before


def test_resolved_config_reproduces_run(dataset, tmp_path):
    assert main(["train", "--config", str(dataset / "train.json"), "--out", str(tmp_path / "a"), "--fold", "0",
                 "--seed", "3"]) == 0
    resolved = tmp_path / "a" / "resolved_config.json"
    assert json.loads(resolved.read_text())["seed"] == 3
    assert main(["train", "--config", str(resolved), "--out", str(tmp_path / "b"), "--fold", "0"]) == 0
    a = (tmp_path / "a" / "checkpoint" / "checkpoint.milw").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint" / "checkpoint.milw").read_bytes()


def test_eval_and_heatmap(dataset, tmp_path):
    assert main(["train", "--config", str(dataset / "train.json"), "--out", str(tmp_path / "t")]) == 0
    ckpt = str(tmp_path / "t" / "checkpoint")
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert len(report["slide_confusion"]) == 3
    manifest = json.loads((dataset / "data" / "manifest.json").read_text())
    tumour = next(s["slide_id"] for s in manifest["slides"] if s["slide_label"] != "normal")
    for mode, score in (("pgm", "attention"), ("csv", "gt_vs_normal")):
        out = tmp_path / "hm" / f"x.{mode}"
        assert main(["heatmap", "--checkpoint", ckpt, "--slide", tumour, "--out", str(out),
                     "--mode", mode, "--score", score]) == 0
        assert out.exists()
    assert (tmp_path / "hm" / "resolved_config.json").exists()
    assert main(["heatmap", "--checkpoint", ckpt, "--slide", "nope", "--out", str(tmp_path / "y.pgm")]) == 1


def test_gradcheck_subcommand(dataset, tmp_path):
    assert main(["gradcheck", "--config", str(dataset / "train.json"), "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "gradcheck.json").read_text())
    assert set(results) == {"mbdsmil_cl_pl@epoch0", "mbdsmil_cl_pl@epoch1"}
    assert max(results.values()) <= 1e-5


def test_unknown_flag_exit_one(capsys):
    assert main(["cv", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exit_one():
    assert main([]) == 1


def test_invalid_config_names_field(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"epochs": -3, "manifest": "x"}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert "epochs" in capsys.readouterr().err
    (tmp_path / "bad2.json").write_text(json.dumps({"n_classes": 1}))
    assert main(["synth", "--config", str(tmp_path / "bad2.json"), "--out", str(tmp_path / "o")]) == 1


def test_missing_manifest_exit_one(tmp_path, capsys):
    (tmp_path / "t.json").write_text(json.dumps({"epochs": 1, "warmup_epochs": 0}))
    assert main(["cv", "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / "o")]) == 1
    assert "manifest" in capsys.readouterr().err


def test_runtime_failure_exit_two(dataset, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(dataset / "synth.json"), "--out", str(data)]) == 0
    bag = next((data / "bags").glob("*.milb"))
    bag.write_bytes(bag.read_bytes()[:20])
    cfg = json.loads((dataset / "train.json").read_text())
    cfg["manifest"] = str(data / "manifest.json")
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "protomil.cli", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr
