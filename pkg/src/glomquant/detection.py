"""Circle-head decoding, tile merging, false-positive filtering and score curation."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import Circle, CircleDetection, circle_nms
from .taxonomy import CLASS_ORDER, NUM_CLASSES, GlomClass

DEFAULT_SCORE_MIN = 0.5
DEFAULT_MAX_PER_TILE = 100
CURATION_THRESHOLD = 0.7


@dataclass
class HeadMaps:
    """Dense outputs of a center-point circle detector.

    ``offset`` has shape (H, W, 2) holding (dx, dy); ``stride`` is the
    number of input pixels per head cell.
    """

    heatmap: np.ndarray
    offset: np.ndarray
    radius: np.ndarray
    stride: float = 4.0

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.radius = np.asarray(self.radius, dtype=np.float64)
        if self.heatmap.ndim != 2:
            raise ShapeError(f"heatmap must be 2-D, got shape {self.heatmap.shape}")
        hw = self.heatmap.shape
        if self.offset.shape != hw + (2,):
            raise ShapeError(f"offset shape {self.offset.shape} != {hw + (2,)}")
        if self.radius.shape != hw:
            raise ShapeError(f"radius shape {self.radius.shape} != {hw}")

    @classmethod
    def from_json(cls, data) -> "HeadMaps":
        """Parse the fixture format: row-major flat arrays plus dims."""
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        h, w = int(data["height"]), int(data["width"])

        def grid(key, *extra):
            arr = np.asarray(data[key], dtype=np.float64)
            if arr.size != h * w * (extra[0] if extra else 1):
                raise ShapeError(f"{key} has {arr.size} values, expected {h}x{w}")
            return arr.reshape((h, w) + extra)

        offset = np.stack([grid("offset_x"), grid("offset_y")], axis=-1)
        return cls(grid("heatmap"), offset, grid("radius"), float(data.get("stride", 4.0)))

    def to_json(self):
        h, w = self.heatmap.shape
        return {
            "height": h,
            "width": w,
            "stride": self.stride,
            "heatmap": self.heatmap.ravel().tolist(),
            "offset_x": self.offset[..., 0].ravel().tolist(),
            "offset_y": self.offset[..., 1].ravel().tolist(),
            "radius": self.radius.ravel().tolist(),
        }


def _peak_mask(heat):
    """Cells beating all 8 neighbors under (value desc, y asc, x asc) ordering."""
    h, w = heat.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    peak = heat > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            # A tied neighbor earlier in row-major order wins the tie.
            earlier = (dy, dx) < (0, 0)
            peak &= (heat > nb) | ((heat == nb) & (not earlier))
    return peak


def decode_heads(maps: HeadMaps, k=DEFAULT_MAX_PER_TILE, score_min=DEFAULT_SCORE_MIN):
    """Turn head maps into tile-coordinate detections, best first."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not (0.0 <= score_min <= 1.0):
        raise ConfigError("score_min must lie in [0, 1]")
    heat = maps.heatmap
    ys, xs = np.nonzero(_peak_mask(heat))
    scores = heat[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:k]
    out = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        score = float(heat[y, x])
        r = float(maps.radius[y, x]) * maps.stride
        if score < score_min or not r > 0:
            continue
        dx, dy = maps.offset[y, x]
        cx = (x + float(dx)) * maps.stride
        cy = (y + float(dy)) * maps.stride
        out.append(CircleDetection(Circle(cx, cy, r), min(score, 1.0)))
    return out


def merge_tiles(per_tile, nms_iou=0.5):
    """Pool per-tile detections into level-0 coordinates and suppress duplicates.

    ``per_tile`` holds ``(origin, detections)`` pairs where detections are
    already scaled to level-0 pixels relative to ``origin``.
    """
    pooled = [
        d.translated(origin[0], origin[1]) for origin, dets in per_tile for d in dets
    ]
    pooled.sort(key=CircleDetection.sort_key)
    return circle_nms(pooled, nms_iou)


def filter_false_positives(dets, patch_classifier_probs):
    """Drop detections classified non-glomerular; label the rest by argmax."""
    if len(dets) != len(patch_classifier_probs):
        raise ShapeError(
            f"{len(dets)} detections but {len(patch_classifier_probs)} probability vectors"
        )
    kept = []
    for det, probs in zip(dets, patch_classifier_probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (NUM_CLASSES,):
            raise ShapeError(f"probability vector must have {NUM_CLASSES} entries, got {probs.shape}")
        label = CLASS_ORDER[int(np.argmax(probs))]
        if label is not GlomClass.NON_GLOMERULAR:
            kept.append(det.with_label(label))
    return kept


def curate_by_score(candidates, threshold=CURATION_THRESHOLD):
    """Ids whose detection score reaches ``threshold`` (``>=``), in input order."""
    return [cid for cid, score in candidates if score >= threshold]
