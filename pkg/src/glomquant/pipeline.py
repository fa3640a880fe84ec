"""Slide-to-outputs orchestration: detect, classify, segment, emit.

Output tree for each slide ``<wsi>``::

    <output>/<wsi>/<wsi>.xml            ImageScope annotations
    <output>/<wsi>/detections.json      one JSON object per region
    <output>/<wsi>/classification.csv   per-detection class probabilities
    <output>/<wsi>/summary.csv          per-class counts
    <output>/<wsi>/patches/*.png        patches and *_mask.png masks
    <output>/run_manifest.json          config, backends, output hashes
    <output>/failed/<wsi>/              partial outputs of a failed slide
"""

import csv
import hashlib
import io
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .annotations import (
    AnnotationDoc,
    Region,
    atomic_write,
    mask_name,
    quantize_circle,
    read_detections_jsonl,
    write_imagescope_xml,
    write_results_json,
)
from .backends import MockClassifier, MockDetector, MockSegmenter, external_backend
from .backends.base import check_mask, check_probs
from .detection import HeadMaps, decode_heads, filter_false_positives, merge_tiles
from .errors import BackendError, ConfigError
from .geometry import CircleDetection, detection_to_window
from .taxonomy import CLASS_ORDER
from .wsi import WHITE, PhantomTruth, iter_tiles, open_slide

log = logging.getLogger(__name__)

STEPS = ("detect", "classify", "segment")
SEG_MODES = ("native256", "resize512", "pad512")
SEG_SIZE = 512
MANIFEST_NAME = "run_manifest.json"


def _default_backends():
    return {
        "detector": {"kind": "mock", "sigma": 0.0, "fp_rate": 0.0},
        "classifier": {"kind": "mock"},
        "segmenter": {"kind": "mock"},
    }


@dataclass
class PipelineConfig:
    input: list
    output: str
    steps: list = field(default_factory=lambda: list(STEPS))
    detection_downsample: float = 4.0
    tile_size: int = 512
    overlap: int = 64
    score_min: float = 0.5
    nms_iou: float = 0.5
    max_per_tile: int = 100
    pad: int = 50
    patch_size: int = 256
    seg_mode: str = "native256"
    backends: dict = field(default_factory=_default_backends)
    seed: int = 0
    workers: int = 1
    backend_timeout: float = 60.0
    max_in_flight: int = 8

    def __post_init__(self):
        if isinstance(self.input, (str, Path)):
            self.input = [str(self.input)]
        self.input = [str(p) for p in self.input]
        self.output = str(self.output)
        if isinstance(self.steps, str):
            self.steps = [s.strip() for s in self.steps.split(",") if s.strip()]
        self.steps = [s for s in STEPS if s in set(self.steps)]
        self.validate()

    def validate(self):
        if not self.steps:
            raise ConfigError("steps must name at least one of detect, classify, segment")
        for name in ("score_min", "nms_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.tile_size <= self.overlap or self.overlap < 0:
            raise ConfigError("need tile_size > overlap >= 0")
        if self.max_per_tile < 1 or self.patch_size < 1 or self.pad < 0 or self.workers < 1:
            raise ConfigError("max_per_tile, patch_size and workers must be positive; pad >= 0")
        if self.seg_mode not in SEG_MODES:
            raise ConfigError(f"seg_mode must be one of {SEG_MODES}")
        backends = _default_backends()
        backends.update(self.backends or {})
        for role, spec in backends.items():
            if role not in ("detector", "classifier", "segmenter"):
                raise ConfigError(f"unknown backend role {role!r}")
            if spec.get("kind") not in ("mock", "external"):
                raise ConfigError(f"backend {role}: kind must be mock or external")
            if spec["kind"] == "external" and not spec.get("argv"):
                raise ConfigError(f"backend {role}: external backends need argv")
        self.backends = backends

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "input" not in data or "output" not in data:
            raise ConfigError("config needs input and output")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


def discover_slides(inputs):
    """Slide directories named by ``inputs`` (a slide dir or a dir of slide dirs)."""
    found = []
    for p in map(Path, inputs):
        if (p / "manifest.json").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(d for d in p.iterdir() if (d / "manifest.json").exists()))
        else:
            raise ConfigError(f"input {p} is not a directory")
    return found


class BackendSet:
    """Resolves backend specs; external processes are spawned once per run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._external = {}

    def _spawn(self, role):
        if role not in self._external:
            spec = self.cfg.backends[role]
            self._external[role] = external_backend(
                role,
                spec["argv"],
                spec.get("env"),
                spec.get("timeout", self.cfg.backend_timeout),
                spec.get("max_in_flight", self.cfg.max_in_flight),
            )
        return self._external[role]

    def for_slide(self, slide_dir):
        b = self.cfg.backends
        out = {}
        for role, mock in (("classifier", MockClassifier), ("segmenter", MockSegmenter)):
            out[role] = mock() if b[role]["kind"] == "mock" else self._spawn(role)
        spec = b["detector"]
        if spec["kind"] == "mock":
            truth = PhantomTruth.load(slide_dir)
            out["detector"] = MockDetector(
                truth, spec.get("sigma", 0.0), spec.get("fp_rate", 0.0), spec.get("seed", self.cfg.seed)
            )
        else:
            out["detector"] = self._spawn("detector")
        return out

    def close(self):
        for backend in self._external.values():
            backend.client.close()


def extract_patch(slide, transform):
    """Read the transform's level-0 window and resize it onto the patch grid."""
    tile = slide.read_window(transform.window, level=0)
    im = Image.fromarray(tile.pixels)
    return np.asarray(im.resize((transform.out_w, transform.out_h), Image.BILINEAR))


def segmentation_input(patch, mode):
    if mode == "native256":
        return patch
    if mode == "resize512":
        return np.asarray(Image.fromarray(patch).resize((SEG_SIZE, SEG_SIZE), Image.BILINEAR))
    h, w = patch.shape[:2]
    canvas = np.full((SEG_SIZE, SEG_SIZE, 3), WHITE, dtype=np.uint8)
    oy, ox = (SEG_SIZE - h) // 2, (SEG_SIZE - w) // 2
    canvas[oy : oy + h, ox : ox + w] = patch
    return canvas


def mask_to_patch(mask, mode, shape):
    """Bring a segmenter mask back to the patch grid."""
    h, w = shape[:2]
    if mode == "native256":
        return mask
    if mode == "resize512":
        m = Image.fromarray(mask.astype(np.uint8) * 255).resize((w, h), Image.BILINEAR)
        return np.asarray(m) >= 128
    oy, ox = (mask.shape[0] - h) // 2, (mask.shape[1] - w) // 2
    return mask[oy : oy + h, ox : ox + w]


def _detect(slide, detector, cfg, pool):
    level = slide.level_for_downsample(cfg.detection_downsample)
    windows = iter_tiles(slide, level, cfg.tile_size, cfg.overlap)

    def one(tw):
        tile = slide.read_tile(tw)
        raw = detector.detect(tile)
        if isinstance(raw, HeadMaps):
            dets = decode_heads(raw, cfg.max_per_tile, cfg.score_min)
        else:
            dets = sorted((d for d in raw if d.score >= cfg.score_min), key=CircleDetection.sort_key)
            dets = dets[: cfg.max_per_tile]
        return tile.origin, [d.translated(0.0, 0.0, tw.downsample) for d in dets]

    per_tile = list(pool.map(one, windows))
    merged = merge_tiles(per_tile, cfg.nms_iou)
    quantized = [CircleDetection(quantize_circle(d.circle), d.score, d.label) for d in merged]
    return [Region(i, d.circle, d.score, d.label) for i, d in enumerate(quantized, start=1)]


def _transform(region, slide, cfg):
    det = CircleDetection(region.circle, region.score if region.score is not None else 1.0)
    return detection_to_window(det, cfg.pad, slide.dimensions, slide.mpp, cfg.patch_size)


def _classification_csv(regions, probs, kept_ids):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region_id", "cx", "cy", "r", "class", "kept"] + [f"p_{c.value}" for c in CLASS_ORDER])
    for r, p in zip(regions, probs):
        label = CLASS_ORDER[int(np.argmax(p))]
        c = r.circle
        w.writerow([r.id, c.cx, c.cy, c.r, label.value, int(r.id in kept_ids)] + [repr(float(x)) for x in p])
    return buf.getvalue().encode()


def process_slide(slide_dir, cfg, backends, pool):
    slide = open_slide(slide_dir)
    wsi_id = slide.slide_id
    out = Path(cfg.output) / wsi_id
    out.mkdir(parents=True, exist_ok=True)
    steps = set(cfg.steps)

    if "detect" in steps:
        regions = _detect(slide, backends["detector"], cfg, pool)
    else:
        prior = out / "detections.json"
        if not prior.exists():
            raise ConfigError(f"{wsi_id}: steps {cfg.steps} need existing detections at {prior}")
        regions = sorted(read_detections_jsonl(prior).get(wsi_id, []), key=lambda r: r.id)

    transforms = {}
    patches = {}
    if steps & {"classify", "segment"}:
        transforms = {r.id: _transform(r, slide, cfg) for r in regions}
        imgs = pool.map(lambda r: extract_patch(slide, transforms[r.id]), regions)
        patches = dict(zip((r.id for r in regions), imgs))
        if (out / "patches").exists():
            shutil.rmtree(out / "patches")

    if "classify" in steps:
        classifier = backends["classifier"]
        probs = list(pool.map(lambda r: check_probs(classifier.classify(patches[r.id])), regions))
        dets = [CircleDetection(r.circle, r.score, r.label) for r in regions]
        # Survivors share circle objects with their inputs.
        labels = {id(d.circle): d.label for d in filter_false_positives(dets, probs)}
        kept = [
            Region(r.id, r.circle, r.score, labels[id(r.circle)])
            for r in regions
            if id(r.circle) in labels
        ]
        atomic_write(out / "classification.csv", _classification_csv(regions, probs, {r.id for r in kept}))
        regions = kept
        patches = {r.id: patches[r.id] for r in regions}

    masks = {}
    if "segment" in steps:
        segmenter = backends["segmenter"]
        mode = cfg.seg_mode

        def seg(r):
            patch = patches[r.id]
            inp = segmentation_input(patch, mode)
            m = check_mask(segmenter.segment(inp), inp.shape)
            return mask_to_patch(m, mode, patch.shape)

        masks = dict(zip((r.id for r in regions), pool.map(seg, regions)))

    doc = AnnotationDoc(
        slide.mpp,
        [
            Region(r.id, r.circle, r.score, r.label, _mask_ref(wsi_id, r) if r.id in masks else None)
            for r in regions
        ],
        dims=slide.dimensions,
    )
    atomic_write(out / f"{wsi_id}.xml", write_imagescope_xml(doc))
    write_results_json(doc, out, wsi_id, patches if steps & {"classify", "segment"} else None, masks)
    return {"wsi_id": wsi_id, "status": "ok", "n_detections": len(doc.regions)}


def _mask_ref(wsi_id, region):
    return f"patches/{mask_name(wsi_id, region)}"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_hashes(root):
    root = Path(root)
    files = sorted(
        p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".tmp")
    )
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in files}


@dataclass
class RunResult:
    exit_code: int
    manifest: dict


def run(cfg: PipelineConfig) -> RunResult:
    """Process every input slide; failures are isolated per slide.

    Exit code 0 when every slide succeeded, 2 otherwise. A backend failure
    (broken or timed-out external process) stops the remaining slides.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    slides = discover_slides(cfg.input)
    backends = BackendSet(cfg)
    results = []
    identities = {}
    aborted = None
    try:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for slide_dir in slides:
                wsi_id = slide_dir.name
                if aborted is not None:
                    results.append({"wsi_id": wsi_id, "status": "skipped", "error": aborted})
                    continue
                failed_dir = out / "failed" / wsi_id
                if failed_dir.exists():
                    shutil.rmtree(failed_dir)
                try:
                    be = backends.for_slide(slide_dir)
                    identities = {k: v.identity for k, v in sorted(be.items())}
                    results.append(process_slide(slide_dir, cfg, be, pool))
                except Exception as e:
                    log.error("slide %s failed: %s", wsi_id, e)
                    _quarantine(out, slide_dir, failed_dir)
                    results.append({"wsi_id": wsi_id, "status": "failed", "error": str(e)})
                    if isinstance(e, BackendError):
                        aborted = f"aborted after backend failure: {e}"
    finally:
        backends.close()

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "backends": identities,
        "slides": results,
        "outputs": output_hashes(out),
    }
    atomic_write(out / MANIFEST_NAME, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    ok = all(r["status"] == "ok" for r in results)
    return RunResult(0 if ok else 2, manifest)


def _quarantine(out, slide_dir, failed_dir):
    partial = out / Path(slide_dir).name
    if partial.exists():
        failed_dir.parent.mkdir(parents=True, exist_ok=True)
        shutil.move(str(partial), str(failed_dir))
