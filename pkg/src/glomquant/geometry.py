"""Circle primitives, circle IoU, circle NMS and crop/resize coordinate algebra.

Coordinates follow the slide convention: x to the right, y downward,
origin at the level-0 top-left corner.
"""

import math
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError, InvalidGeometryError, OutOfBoundsError
from .taxonomy import GlomClass

BILINEAR_RESIZE = "bilinear-resize"
CONSTANT_PAD = "constant-pad"
MODES = (BILINEAR_RESIZE, CONSTANT_PAD)

DEFAULT_MPP = 0.25
DEFAULT_PAD = 50
DEFAULT_PATCH_SIZE = 256


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise InvalidGeometryError(f"non-finite center ({self.cx}, {self.cy})")
        if not math.isfinite(self.r) or self.r <= 0:
            raise InvalidGeometryError(f"radius must be finite and positive, got {self.r}")

    @property
    def area(self) -> float:
        return math.pi * self.r * self.r

    def bbox(self):
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)


@dataclass(frozen=True)
class CircleDetection:
    circle: Circle
    score: float
    label: Optional[GlomClass] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidGeometryError(f"score must lie in [0, 1], got {self.score}")

    def with_label(self, label):
        return CircleDetection(self.circle, self.score, label)

    def translated(self, dx, dy, scale=1.0):
        c = self.circle
        return CircleDetection(
            Circle(dx + c.cx * scale, dy + c.cy * scale, c.r * scale), self.score, self.label
        )

    def sort_key(self):
        """Score descending, then (cy, cx, r, label) ascending."""
        c = self.circle
        return (-self.score, c.cy, c.cx, c.r, self.label.value if self.label else "")


def circle_iou(a: Circle, b: Circle) -> float:
    """Exact intersection-over-union of two circles (lens formula)."""
    for c in (a, b):
        if not (math.isfinite(c.r) and c.r > 0 and math.isfinite(c.cx) and math.isfinite(c.cy)):
            raise InvalidGeometryError(f"invalid circle {c}")
    r1, r2 = a.r, b.r
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    if d >= r1 + r2:
        return 0.0
    a1, a2 = math.pi * r1 * r1, math.pi * r2 * r2
    if d <= abs(r1 - r2):
        return min(a1, a2) / max(a1, a2)
    c1 = max(-1.0, min(1.0, (d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)))
    c2 = max(-1.0, min(1.0, (d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)))
    t1, t2 = math.acos(c1), math.acos(c2)
    # Each term is a circular segment: r^2 (t - sin t cos t).
    inter = r1 * r1 * (t1 - math.sin(t1) * c1) + r2 * r2 * (t2 - math.sin(t2) * c2)
    inter = max(0.0, min(inter, min(a1, a2)))
    union = a1 + a2 - inter
    return max(0.0, min(1.0, inter / union))


def circle_nms(dets, iou_threshold: float = 0.5):
    """Greedy per-label suppression; output ordered by score descending."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ConfigError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept = []
    for det in sorted(dets, key=CircleDetection.sort_key):
        if all(
            k.label != det.label or circle_iou(k.circle, det.circle) < iou_threshold for k in kept
        ):
            kept.append(det)
    return kept


@dataclass(frozen=True)
class PatchTransform:
    """Affine map between a level-0 window and an ``out_w x out_h`` patch grid.

    ``bilinear-resize`` stretches the window onto the grid. ``constant-pad``
    keeps the scale at 1 and centers the window on the grid.
    """

    x0: int
    y0: int
    x1: int
    y1: int
    out_w: int = DEFAULT_PATCH_SIZE
    out_h: int = DEFAULT_PATCH_SIZE
    mode: str = BILINEAR_RESIZE
    mpp: float = DEFAULT_MPP

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise InvalidGeometryError(f"empty window {self.window}")
        if self.out_w <= 0 or self.out_h <= 0:
            raise InvalidGeometryError("output size must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def window(self):
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def scale(self):
        """Patch pixels per slide pixel along (x, y)."""
        if self.mode == BILINEAR_RESIZE:
            return (self.out_w / self.width, self.out_h / self.height)
        return (1.0, 1.0)

    @property
    def offset(self):
        """Patch-space position of the window origin."""
        if self.mode == BILINEAR_RESIZE:
            return (0.0, 0.0)
        return ((self.out_w - self.width) // 2, (self.out_h - self.height) // 2)

    def map_to_slide(self, px):
        (sx, sy), (ox, oy) = self.scale, self.offset
        return (self.x0 + (px[0] - ox) / sx, self.y0 + (px[1] - oy) / sy)

    def map_to_patch(self, pt):
        (sx, sy), (ox, oy) = self.scale, self.offset
        return (ox + (pt[0] - self.x0) * sx, oy + (pt[1] - self.y0) * sy)


def map_to_slide(t: PatchTransform, px):
    return t.map_to_slide(px)


def map_to_patch(t: PatchTransform, pt):
    return t.map_to_patch(pt)


def detection_to_window(
    det,
    pad: int = DEFAULT_PAD,
    slide_dims=None,
    mpp: float = DEFAULT_MPP,
    out_size: int = DEFAULT_PATCH_SIZE,
) -> PatchTransform:
    """Padded bounding box of a detection, rounded outward and clamped to the slide."""
    c = det.circle if isinstance(det, CircleDetection) else det
    if not (c.r > 0):
        raise InvalidGeometryError(f"radius must be positive, got {c.r}")
    x0 = math.floor(c.cx - c.r - pad)
    y0 = math.floor(c.cy - c.r - pad)
    x1 = math.ceil(c.cx + c.r + pad)
    y1 = math.ceil(c.cy + c.r + pad)
    if slide_dims is not None:
        w, h = slide_dims
        if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
            raise OutOfBoundsError(f"window {(x0, y0, x1, y1)} lies outside slide {w}x{h}")
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(w, x1), min(h, y1)
    return PatchTransform(x0, y0, x1, y1, out_size, out_size, BILINEAR_RESIZE, mpp)
