"""File-level evaluation: reconcile prediction and truth files, then score them."""

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import read_detections_jsonl
from .errors import FormatError, ReconciliationError
from .geometry import CircleDetection
from .metrics import (
    EvalReport,
    auc,
    average_precision,
    balanced_accuracy,
    confusion_matrix,
    dice,
    dice_stats,
    excluded_classes,
    macro_f1,
)
from .taxonomy import CLASS_ORDER, GGS_CLASSES, Binary, GlomClass, to_binary
from .wsi import PhantomTruth

MODES = ("detection", "segmentation", "classification")


def _expand(paths, pattern):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.rglob(pattern)))
        elif p.exists():
            out.append(p)
        else:
            raise FormatError(f"{p} does not exist", field="path")
    return out


def load_detections(paths):
    """``{wsi_id: [CircleDetection]}`` from detections.json files or output dirs."""
    out = {}
    for f in _expand(paths, "detections.json"):
        for wsi, regions in read_detections_jsonl(f).items():
            out.setdefault(wsi, []).extend(
                CircleDetection(r.circle, 1.0 if r.score is None else r.score, r.label) for r in regions
            )
    return out


def load_truth_circles(paths, include_non_glomerular=False):
    """Truth circles from phantom ``truth.json`` files or detections.json files."""
    out = {}
    for p in map(Path, paths):
        files = _expand([p], "truth.json") if p.is_dir() else [p]
        if p.is_dir() and not files:
            files = _expand([p], "detections.json")
        for f in files:
            if f.name == "truth.json":
                t = PhantomTruth.load(f)
                pairs = t.circles if include_non_glomerular else t.glomeruli
                out.setdefault(t.slide_id, []).extend(c for c, _ in pairs)
            else:
                for wsi, regions in read_detections_jsonl(f).items():
                    out.setdefault(wsi, []).extend(
                        r.circle
                        for r in regions
                        if include_non_glomerular or r.label is not GlomClass.NON_GLOMERULAR
                    )
    return out


def evaluate_detection(pred_paths, truth_paths):
    preds = load_detections(pred_paths)
    truth = load_truth_circles(truth_paths)
    # A slide without detections has no lines, so only unknown slides are orphans.
    orphans = set(preds) - set(truth)
    if orphans:
        raise ReconciliationError(set(), orphans)
    ap = average_precision(preds, truth)
    n_dets = sum(len(v) for v in preds.values())
    return EvalReport(
        ap=ap["ap"],
        ap50=ap["ap50"],
        ap75=ap["ap75"],
        ap_small=ap["ap_small"],
        ap_medium=ap["ap_medium"],
        extra={"n_detections": n_dets, "n_truth": sum(len(v) for v in truth.values())},
    )


def _mask_files(paths):
    files = _expand(paths, "*_mask.png")
    return {f.name: f for f in files}


def _read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def evaluate_segmentation(pred_paths, truth_paths):
    preds, truth = _mask_files(pred_paths), _mask_files(truth_paths)
    if set(preds) != set(truth):
        raise ReconciliationError(set(truth) - set(preds), set(preds) - set(truth))
    scores = {name: dice(_read_mask(preds[name]), _read_mask(truth[name])) for name in sorted(truth)}
    mean, std = dice_stats(scores.values())
    return EvalReport(dice_mean=mean, dice_std=std, extra={"dice": scores})


def _read_labels(path):
    """``{id: (GlomClass, probs or None)}`` from a labels CSV.

    Accepts manifests (``patch_id,...,label``), prediction files
    (``patch_id,label[,p_<class>...]``) and pipeline ``classification.csv``
    (``region_id,class,...``).
    """
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        id_key = "patch_id" if "patch_id" in fields else "region_id"
        label_key = "label" if "label" in fields else "class"
        prob_keys = [f"p_{c.value}" for c in CLASS_ORDER]
        has_probs = all(k in fields for k in prob_keys)
        if id_key not in fields or label_key not in fields:
            raise FormatError(f"{path}: need an id and a label column", field="header")
        for row in reader:
            probs = np.array([float(row[k]) for k in prob_keys]) if has_probs else None
            out[row[id_key]] = (GlomClass.parse(row[label_key]), probs)
    return out


def evaluate_classification(pred_path, truth_path):
    preds, truth = _read_labels(pred_path), _read_labels(truth_path)
    if set(preds) != set(truth):
        raise ReconciliationError(set(truth) - set(preds), set(preds) - set(truth))
    ids = sorted(truth)
    y_true = [truth[i][0].index for i in ids]
    y_pred = [preds[i][0].index for i in ids]
    cm = confusion_matrix(y_true, y_pred, len(CLASS_ORDER))
    report = EvalReport(
        balanced_accuracy=balanced_accuracy(cm),
        macro_f1=macro_f1(cm),
        confusion=cm.tolist(),
        excluded_classes=[CLASS_ORDER[i].value for i in excluded_classes(cm)],
    )
    if all(preds[i][1] is not None for i in ids):
        report.auc = _binary_auc(ids, preds, truth)
    return report


def _binary_auc(ids, preds, truth):
    """GGS-vs-normal AUC from 5-class probabilities (non-glomerular truth dropped)."""
    ggs = [c.index for c in GGS_CLASSES]
    scores, labels = [], []
    for i in ids:
        b = to_binary(truth[i][0])
        if b is Binary.DROPPED:
            continue
        p = preds[i][1]
        glom = p[ggs].sum() + p[GlomClass.NORMAL.index]
        scores.append(p[ggs].sum() / glom if glom > 0 else 0.0)
        labels.append(1 if b is Binary.POSITIVE else 0)
    if len(set(labels)) < 2:
        return None
    return auc(scores, labels)


def evaluate(pred, truth, mode) -> EvalReport:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pred = [pred] if isinstance(pred, (str, Path)) else list(pred)
    truth = [truth] if isinstance(truth, (str, Path)) else list(truth)
    if mode == "detection":
        return evaluate_detection(pred, truth)
    if mode == "segmentation":
        return evaluate_segmentation(pred, truth)
    if len(pred) != 1 or len(truth) != 1:
        raise ValueError("classification mode takes exactly one prediction and one truth file")
    return evaluate_classification(pred[0], truth[0])


def write_report(report, path):
    Path(path).write_text(report.to_json(), encoding="utf-8")
    return json.loads(report.to_json())
