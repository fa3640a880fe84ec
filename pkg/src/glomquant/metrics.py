"""Detection AP (circle IoU), Dice statistics and classification metrics."""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError
from .geometry import circle_iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, MEDIUM_AREA),
}


def _match_image(dets, gts, thr, area_range):
    """Greedy matching for one image.

    ``dets`` arrive sorted best-first. Returns one of ``"tp"``, ``"fp"`` or
    ``"ignore"`` per detection. Ground truths outside ``area_range`` may
    absorb detections, which are then ignored rather than counted.
    """
    lo, hi = area_range
    ignored = [not (lo <= g.area < hi) for g in gts]
    taken = [False] * len(gts)
    out = []
    for d in dets:
        best, best_iou = -1, thr
        # Prefer in-range ground truths; fall back to ignored ones.
        for want_ignored in (False, True):
            for j, g in enumerate(gts):
                if taken[j] or ignored[j] != want_ignored:
                    continue
                iou = circle_iou(d.circle, g)
                if iou >= best_iou:
                    if best < 0 or iou > best_iou:
                        best, best_iou = j, iou
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            out.append("ignore" if ignored[best] else "tp")
        elif lo <= d.circle.area < hi:
            out.append("fp")
        else:
            out.append("ignore")
    return out, sum(not i for i in ignored)


def _interpolated_ap(tp_flags, n_gt):
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not f for f in tp_flags])
    if len(tp_flags) == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(interp) / len(RECALL_GRID)


def average_precision_at(dets_per_image, gts_per_image, thr, area="all"):
    """AP at one IoU threshold, or ``None`` when no ground truth is in range.

    Both arguments map image id -> list (CircleDetections / Circles).
    """
    area_range = AREA_RANGES[area] if isinstance(area, str) else area
    ranked = sorted(
        ((img, d) for img, ds in dets_per_image.items() for d in ds),
        key=lambda t: t[1].sort_key() + (str(t[0]),),
    )
    by_image = {}
    for img, d in ranked:
        by_image.setdefault(img, []).append(d)
    outcome = {}
    n_gt = 0
    for img in set(by_image) | set(gts_per_image):
        res, n = _match_image(by_image.get(img, []), gts_per_image.get(img, []), thr, area_range)
        n_gt += n
        outcome[img] = iter(res)
    if n_gt == 0:
        return None
    flags = []
    for img, _ in ranked:
        o = next(outcome[img])
        if o != "ignore":
            flags.append(o == "tp")
    return _interpolated_ap(flags, n_gt)


def average_precision(dets_per_image, gts_per_image, iou_thresholds=IOU_THRESHOLDS):
    """COCO-style AP family with circle IoU.

    Returns ``{"ap", "ap50", "ap75", "ap_small", "ap_medium", "per_threshold"}``;
    a size bucket with no ground truth is ``None`` (undefined, not zero).
    """
    dets_per_image = _as_mapping(dets_per_image)
    gts_per_image = _as_mapping(gts_per_image)
    per = {t: average_precision_at(dets_per_image, gts_per_image, t) for t in iou_thresholds}
    out = {"per_threshold": per}
    defined = [v for v in per.values() if v is not None]
    out["ap"] = float(np.mean(defined)) if defined else None
    out["ap50"] = per.get(0.5, average_precision_at(dets_per_image, gts_per_image, 0.5))
    out["ap75"] = per.get(0.75, average_precision_at(dets_per_image, gts_per_image, 0.75))
    for name in ("small", "medium"):
        vals = [average_precision_at(dets_per_image, gts_per_image, t, name) for t in iou_thresholds]
        vals = [v for v in vals if v is not None]
        out[f"ap_{name}"] = float(np.mean(vals)) if vals else None
    return out


def _as_mapping(x):
    if isinstance(x, dict):
        return x
    return dict(enumerate(x))


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_stats(values):
    """Mean and population standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return (None, None)
    return (float(v.mean()), float(v.std()))


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def _check_confusion(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    return cm


def excluded_classes(confusion):
    """Indices of classes without ground truth; they are left out of the means."""
    cm = _check_confusion(confusion)
    return [int(i) for i in np.nonzero(cm.sum(axis=1) == 0)[0]]


def balanced_accuracy(confusion) -> float:
    cm = _check_confusion(confusion)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def macro_f1(confusion) -> float:
    cm = _check_confusion(confusion)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    f1 = 2 * tp[present] / (support[present] + predicted[present])
    return float(np.mean(f1))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EvalReport:
    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    ap_small: Optional[float] = None
    ap_medium: Optional[float] = None
    dice_mean: Optional[float] = None
    dice_std: Optional[float] = None
    balanced_accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    auc: Optional[float] = None
    confusion: Optional[list] = None
    excluded_classes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        """Plain-text table with the conventional column headings (AP, AP50, ..., DSC, F1, AUC)."""
        cols = []
        if self.ap is not None or self.ap50 is not None:
            cols += [
                ("AP", self.ap),
                ("AP50", self.ap50),
                ("AP75", self.ap75),
                ("APS", self.ap_small),
                ("APM", self.ap_medium),
            ]
        if self.dice_mean is not None:
            cols.append(("DSC", f"{self.dice_mean:.3f} ± {self.dice_std:.3f}"))
        if self.balanced_accuracy is not None:
            cols += [("Balance acc", self.balanced_accuracy), ("F1", self.macro_f1)]
        if self.auc is not None:
            cols.append(("AUC", self.auc))

        def fmt(v):
            if v is None:
                return "n/a"
            return v if isinstance(v, str) else f"{v:.3f}"

        cells = [(name, fmt(v)) for name, v in cols]
        widths = [max(len(a), len(b)) for a, b in cells]
        head = " | ".join(a.ljust(w) for (a, _), w in zip(cells, widths))
        rule = "-+-".join("-" * w for w in widths)
        body = " | ".join(b.ljust(w) for (_, b), w in zip(cells, widths))
        return f"{head}\n{rule}\n{body}\n"
