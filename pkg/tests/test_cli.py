import json
import os
import subprocess
import sys

from glomquant.cli import main


def test_phantom_run_evaluate(tmp_path, capsys):
    slide = tmp_path / "slides" / "p1"
    assert main(["phantom", "--seed", "7", "--n", "6", "--dims", "1024", "1024", "--radius", "30", "60", "--out", str(slide)]) == 0
    manifest = json.loads((slide / "glo_manifest.json").read_text())
    assert "truth.json" in manifest["outputs"]
    out = tmp_path / "out"
    assert main(["run", "--input", str(tmp_path / "slides"), "--output", str(out), "--workers", "2"]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--mode", "detection", "--pred", str(out), "--truth", str(slide), "--out", str(tmp_path / "r.json")]) == 0
    table = capsys.readouterr().out
    assert "AP50" in table
    assert json.loads((tmp_path / "r.json").read_text())["ap50"] == 1.0


def test_run_with_config_file(tmp_path):
    main(["phantom", "--seed", "1", "--n", "3", "--dims", "768", "768", "--radius", "30", "50", "--out", str(tmp_path / "s")])
    cfg = {"input": [str(tmp_path / "s")], "output": str(tmp_path / "o"), "steps": ["detect"]}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "o" / "s" / "detections.json").exists()


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--input", str(tmp_path / "missing"), "--output", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err
    assert main(["split", "--out", str(tmp_path)]) == 1


def test_split_and_curate(tmp_path, capsys):
    assert main(["split", "--patients", "157", "--out", str(tmp_path / "f")]) == 0
    folds = json.loads((tmp_path / "f" / "folds.json").read_text())
    assert sorted(len(f["test"]) for f in folds["folds"]) == [31, 31, 31, 32, 32]
    (tmp_path / "c.csv").write_text("id,score\na,0.9\nb,0.69\nc,0.7\n")
    assert main(["curate", "--input", str(tmp_path / "c.csv"), "--out", str(tmp_path / "k")]) == 0
    assert (tmp_path / "k" / "kept.txt").read_text() == "a\nc\n"


def test_train_toy_small(tmp_path):
    args = ["train-toy", "--steps", "40", "--n", "80", "--dim", "8", "--fractions", "0.25", "1.0", "--out", str(tmp_path)]
    assert main(args) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["probe_balanced_accuracy"]) == {"0.25", "1.0"}
    assert (tmp_path / "params.f32.json").exists()


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ, GLO_LOG_LEVEL="ERROR")
    r = subprocess.run([sys.executable, "-m", "glomquant.cli", "--version"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and r.stdout.strip()
