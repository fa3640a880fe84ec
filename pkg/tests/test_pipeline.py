import json
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from glomquant.errors import ConfigError
from glomquant.geometry import Circle, CircleDetection, circle_iou, detection_to_window
from glomquant.metrics import dice
from glomquant.pipeline import MANIFEST_NAME, PipelineConfig, run
from glomquant.wsi import generate_phantom, truth_mask_in_patch

FAKE = str(Path(__file__).parent / "fake_backend.py")
MIX = {"normal": 0.4, "obsolescent": 0.3, "solidified": 0.1, "disappearing": 0.1, "non_glomerular": 0.1}


@pytest.fixture(scope="module")
def slides(tmp_path_factory):
    root = tmp_path_factory.mktemp("slides")
    truths = {}
    for name, seed in (("alpha", 1), ("beta", 2)):
        _, truths[name] = generate_phantom(seed, (1536, 1536), 8, MIX, out_dir=root / name, radius_range=(40, 80))
    return root, truths


def files(out):
    return sorted(p.relative_to(out).as_posix() for p in Path(out).rglob("*") if p.is_file())


def test_full_run_outputs(slides, tmp_path):
    root, truths = slides
    res = run(PipelineConfig([str(root)], str(tmp_path)))
    assert res.exit_code == 0
    listing = files(tmp_path)
    for wsi in ("alpha", "beta"):
        for name in ("detections.json", f"{wsi}.xml", "summary.csv", "classification.csv"):
            assert f"{wsi}/{name}" in listing
        n_glom = len(truths[wsi].glomeruli)
        assert sum(f.startswith(f"{wsi}/patches/") and f.endswith("_mask.png") for f in listing) == n_glom
    m = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert set(m["outputs"]) == set(listing) - {MANIFEST_NAME}
    assert m["backends"]["detector"].startswith("mock-detector")
    assert [s["status"] for s in m["slides"]] == ["ok", "ok"]


def test_step_gating_and_resume(slides, tmp_path):
    root, _ = slides
    run(PipelineConfig([str(root / "alpha")], str(tmp_path / "split"), steps="detect"))
    assert not (tmp_path / "split" / "alpha" / "patches").exists()
    res = run(PipelineConfig([str(root / "alpha")], str(tmp_path / "split"), steps="classify,segment"))
    assert res.exit_code == 0
    run(PipelineConfig([str(root / "alpha")], str(tmp_path / "once")))
    for name in ("detections.json", "alpha.xml"):
        assert (tmp_path / "split" / "alpha" / name).read_bytes() == (tmp_path / "once" / "alpha" / name).read_bytes()


def test_resume_without_detections_fails(slides, tmp_path):
    root, _ = slides
    res = run(PipelineConfig([str(root / "alpha")], str(tmp_path), steps="segment"))
    assert res.exit_code == 2
    assert res.manifest["slides"][0]["status"] == "failed"


@pytest.mark.parametrize("mode", ["resize512", "pad512"])
def test_segmentation_modes(slides, tmp_path, mode):
    root, truths = slides
    run(PipelineConfig([str(root / "beta")], str(tmp_path), seg_mode=mode))
    truth = truths["beta"]
    for line in (tmp_path / "beta" / "detections.json").read_text().splitlines():
        rec = json.loads(line)
        c = Circle(rec["cx"], rec["cy"], rec["r"])
        g = max(truth.glomeruli, key=lambda t: circle_iou(c, t[0]))[0]
        tf = detection_to_window(CircleDetection(c, 1.0), 50, truth.dims)
        name = f"beta_{rec['region_id']}_{rec['class']}_mask.png"
        with Image.open(tmp_path / "beta" / "patches" / name) as im:
            assert dice(np.asarray(im) > 0, truth_mask_in_patch(tf, g)) >= 0.97


def test_broken_slide_is_quarantined(slides, tmp_path):
    root, _ = slides
    work = tmp_path / "in"
    shutil.copytree(root / "alpha", work / "alpha")
    shutil.copytree(root / "beta", work / "beta")
    (work / "alpha" / "level_0.png").write_bytes(b"not a png")
    res = run(PipelineConfig([str(work)], str(tmp_path / "out")))
    assert res.exit_code == 2
    status = {s["wsi_id"]: s["status"] for s in res.manifest["slides"]}
    assert status == {"alpha": "failed", "beta": "ok"}
    assert (tmp_path / "out" / "failed" / "alpha").is_dir()
    assert not (tmp_path / "out" / "alpha").exists()


def test_backend_failure_aborts_remaining(slides, tmp_path):
    root, _ = slides
    cfg = PipelineConfig(
        [str(root)],
        str(tmp_path),
        backends={"classifier": {"kind": "external", "argv": [sys.executable, FAKE, "exit"]}},
        backend_timeout=5,
    )
    res = run(cfg)
    assert res.exit_code == 2
    assert [s["status"] for s in res.manifest["slides"]] == ["failed", "skipped"]


def test_external_backends_match_mocks(slides, tmp_path):
    root, _ = slides
    server = [sys.executable, "-m", "glomquant.backends.server"]
    ext = {
        "classifier": {"kind": "external", "argv": server},
        "segmenter": {"kind": "external", "argv": server},
        "detector": {"kind": "external", "argv": server + ["--truth", str(root / "alpha")]},
    }
    assert run(PipelineConfig([str(root / "alpha")], str(tmp_path / "ext"), backends=ext, workers=4)).exit_code == 0
    run(PipelineConfig([str(root / "alpha")], str(tmp_path / "mock")))
    for name in ("detections.json", "alpha.xml", "classification.csv"):
        assert (tmp_path / "ext" / "alpha" / name).read_bytes() == (tmp_path / "mock" / "alpha" / name).read_bytes()


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig(["x"], "y", steps="bogus")
    with pytest.raises(ConfigError):
        PipelineConfig(["x"], "y", nms_iou=2)
    with pytest.raises(ConfigError):
        PipelineConfig(["x"], "y", backends={"classifier": {"kind": "external"}})
    (tmp_path / "c.json").write_text(json.dumps({"input": ["a"], "output": "b", "colour": 1}))
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "c.json")
    (tmp_path / "c.json").write_text(json.dumps({"input": ["a"], "output": "b", "workers": 2}))
    cfg = PipelineConfig.load(tmp_path / "c.json", workers=3)
    assert cfg.workers == 3 and cfg.steps == ["detect", "classify", "segment"]
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
