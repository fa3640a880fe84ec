"""Deterministic test doubles driven by phantom ground truth.

These backends read the answer out of the phantom (truth circles, the
intensity band that encodes each class). They exercise pipeline plumbing
and metrics; they are not models and say nothing about learning.
"""

import math

import numpy as np
from scipy import ndimage

from ..errors import UnsupportedSourceError
from ..geometry import Circle, CircleDetection
from ..taxonomy import CLASS_ORDER, NUM_CLASSES, GlomClass
from ..wsi import BACKGROUND_INTENSITY, CLASS_INTENSITY
from .base import check_patch

DECODED_PROB = 0.9
CENTER_FRACTION = 0.08

_BANDS = [(BACKGROUND_INTENSITY, None)] + [(CLASS_INTENSITY[c], c) for c in CLASS_ORDER]


def decode_band(value):
    """Nearest intensity band; ``None`` means background."""
    return min(_BANDS, key=lambda b: (abs(b[0] - value), b[0]))[1]


def _center_value(gray):
    h, w = gray.shape
    half = max(1, int(round(CENTER_FRACTION * min(h, w))))
    cy, cx = h // 2, w // 2
    return float(np.median(gray[max(0, cy - half) : cy + half, max(0, cx - half) : cx + half]))


def _circle_hits_rect(c, x0, y0, x1, y1):
    nx = min(max(c.cx, x0), x1)
    ny = min(max(c.cy, y0), y1)
    return (nx - c.cx) ** 2 + (ny - c.cy) ** 2 < c.r * c.r


class MockDetector:
    """Emits the truth circles that touch a tile, optionally jittered, plus spurious ones.

    Jitter is drawn per truth circle (not per tile), so a glomerulus seen by
    two overlapping tiles gets the same detection from both. Spurious
    detections are labeled ``NON_GLOMERULAR``.
    """

    def __init__(self, truth, sigma=0.0, fp_rate=0.0, seed=0):
        self.truth = truth
        self.sigma = float(sigma)
        self.fp_rate = float(fp_rate)
        self.seed = int(seed)
        self.identity = f"mock-detector(sigma={self.sigma:g},fp_rate={self.fp_rate:g},seed={self.seed})"
        self._jittered = [self._jitter(i, c) for i, (c, _) in enumerate(truth.circles)]

    def _jitter(self, i, c):
        if self.sigma == 0:
            return CircleDetection(c, 1.0)
        rng = np.random.default_rng([self.seed, 0, i])
        dx, dy, dr = rng.normal(0.0, self.sigma, size=3)
        mag = math.sqrt(dx * dx + dy * dy + dr * dr)
        score = min(1.0, max(0.5, 1.0 - mag / c.r))
        r = max(1.0, c.r + dr)
        return CircleDetection(Circle(c.cx + dx, c.cy + dy, r), score)

    def detect(self, tile):
        if tile.source != self.truth.slide_id:
            raise UnsupportedSourceError(
                f"tile from {tile.source!r}, detector holds truth for {self.truth.slide_id!r}"
            )
        ds = tile.downsample
        ox, oy = tile.origin
        x1, y1 = ox + tile.size[0] * ds, oy + tile.size[1] * ds
        out = []
        for (c, _), det in zip(self.truth.circles, self._jittered):
            if _circle_hits_rect(c, ox, oy, x1, y1):
                out.append(det.translated(-ox / ds, -oy / ds, 1.0 / ds))
        if self.fp_rate > 0:
            rng = np.random.default_rng([self.seed, 1, int(ox), int(oy), tile.level])
            for _ in range(rng.poisson(self.fp_rate)):
                r = float(rng.uniform(8.0, 24.0))
                cx = float(rng.uniform(0, tile.size[0]))
                cy = float(rng.uniform(0, tile.size[1]))
                score = float(rng.uniform(0.1, 0.6))
                out.append(CircleDetection(Circle(cx, cy, r), score, GlomClass.NON_GLOMERULAR))
        return out


class MockClassifier:
    """Decodes the phantom intensity band at the patch center."""

    identity = "mock-classifier"

    def classify(self, patch):
        patch = check_patch(patch)
        label = decode_band(_center_value(patch.mean(axis=2)))
        label = GlomClass.NON_GLOMERULAR if label is None else label
        probs = np.full(NUM_CLASSES, (1.0 - DECODED_PROB) / (NUM_CLASSES - 1))
        probs[label.index] = DECODED_PROB
        return probs


class MockSegmenter:
    """Thresholds halfway between background and the center's band, keeps the center blob."""

    identity = "mock-segmenter"

    def segment(self, patch):
        patch = check_patch(patch)
        gray = patch.astype(np.float64).mean(axis=2)
        label = decode_band(_center_value(gray))
        if label is None:
            return np.zeros(gray.shape, dtype=bool)
        cut = (BACKGROUND_INTENSITY + CLASS_INTENSITY[label]) / 2.0
        fg = gray < cut
        blobs, _ = ndimage.label(fg)
        center = blobs[gray.shape[0] // 2, gray.shape[1] // 2]
        if center == 0:
            return np.zeros(gray.shape, dtype=bool)
        return blobs == center
