"""Multi-resolution slide access, tiling, and synthetic phantom slides.

The on-disk test pyramid is a directory::

    manifest.json   {"mpp": 0.25, "levels": [{"w":..,"h":..,"downsample":..,"file":..}]}
    level_0.png     8-bit RGB, one file per level
    truth.json      phantom ground truth (phantoms only)
    masks/          per-circle binary masks (phantoms only)

Phantom glomeruli are disks whose interior intensity encodes their class
(see :data:`CLASS_INTENSITY`); the mock backends decode that band. They are
test fixtures, not a model of real tissue.
"""

import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, PlacementError
from .geometry import DEFAULT_MPP, Circle
from .taxonomy import CLASS_ORDER, DEFAULT_CLASS_MIX, GlomClass

log = logging.getLogger(__name__)

WHITE = 255
BACKGROUND_INTENSITY = 236
CLASS_INTENSITY = {
    GlomClass.NORMAL: 196,
    GlomClass.OBSOLESCENT: 156,
    GlomClass.SOLIDIFIED: 116,
    GlomClass.DISAPPEARING: 76,
    GlomClass.NON_GLOMERULAR: 36,
}
# Per-channel offsets; they sum to zero so the channel mean stays on the band.
TISSUE_TINT = np.array([8.0, -14.0, 6.0])
BACKGROUND_TINT = np.array([2.0, -4.0, 2.0])
NOISE_STD = 3.0
PHANTOM_DOWNSAMPLES = (1, 2, 4)
DEFAULT_RADIUS_RANGE = (48.0, 96.0)
SUPERSAMPLE = 4

Image.MAX_IMAGE_PIXELS = None


@dataclass(frozen=True)
class Level:
    width: int
    height: int
    downsample: float
    file: str = ""


@dataclass(frozen=True)
class TileWindow:
    """A tile position in read-level pixel coordinates."""

    level: int
    x: int
    y: int
    w: int
    h: int
    downsample: float

    @property
    def origin_level0(self):
        return (self.x * self.downsample, self.y * self.downsample)


@dataclass
class Tile:
    level: int
    origin: tuple
    size: tuple
    pixels: np.ndarray
    downsample: float = 1.0
    source: str = ""

    def __post_init__(self):
        w, h = self.size
        if self.pixels.shape != (h, w, 3) or self.pixels.dtype != np.uint8:
            raise FormatError(
                f"tile pixels must be uint8 of shape {(h, w, 3)}, got "
                f"{self.pixels.dtype} {self.pixels.shape}",
                field="pixels",
            )


class SlidePyramid:
    """Read-only multi-resolution slide.

    Level planes load lazily and are cached; after loading, reads are
    lock-free and safe from any number of threads.
    """

    def __init__(self, levels, mpp=DEFAULT_MPP, path=None, slide_id=None, arrays=None):
        self.levels = list(levels)
        self.mpp = float(mpp)
        self.path = Path(path) if path is not None else None
        self.slide_id = slide_id or (self.path.name if self.path else "memory")
        self._arrays = dict(enumerate(arrays)) if arrays is not None else {}
        self._lock = threading.Lock()
        _validate_levels(self.levels)
        if not self.mpp > 0:
            raise FormatError("must be positive", field="mpp")

    @property
    def dimensions(self):
        return (self.levels[0].width, self.levels[0].height)

    @property
    def level_count(self):
        return len(self.levels)

    def level_for_downsample(self, downsample):
        """Index of the level whose downsample is closest to the request."""
        return min(
            range(len(self.levels)), key=lambda i: (abs(self.levels[i].downsample - downsample), i)
        )

    def _plane(self, level):
        arr = self._arrays.get(level)
        if arr is not None:
            return arr
        with self._lock:
            arr = self._arrays.get(level)
            if arr is None:
                lv = self.levels[level]
                f = self.path / lv.file
                if not f.exists():
                    raise FormatError(f"missing level file {f}", field=f"levels[{level}].file")
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"))
                if arr.shape[:2] != (lv.height, lv.width):
                    raise FormatError(
                        f"{lv.file} is {arr.shape[1]}x{arr.shape[0]}, manifest says "
                        f"{lv.width}x{lv.height}",
                        field=f"levels[{level}]",
                    )
                arr.setflags(write=False)
                self._arrays[level] = arr
        return arr

    def read_region(self, level, origin, size) -> Tile:
        """Read ``size`` pixels at ``level`` starting at level-0 ``origin``.

        Pixels outside the slide are white.
        """
        if not (0 <= level < len(self.levels)):
            raise IndexError(f"level {level} out of range 0..{len(self.levels) - 1}")
        lv = self.levels[level]
        w, h = int(size[0]), int(size[1])
        lx = int(math.floor(origin[0] / lv.downsample))
        ly = int(math.floor(origin[1] / lv.downsample))
        out = np.full((h, w, 3), WHITE, dtype=np.uint8)
        sx0, sy0 = max(lx, 0), max(ly, 0)
        sx1, sy1 = min(lx + w, lv.width), min(ly + h, lv.height)
        if sx1 > sx0 and sy1 > sy0:
            plane = self._plane(level)
            out[sy0 - ly : sy1 - ly, sx0 - lx : sx1 - lx] = plane[sy0:sy1, sx0:sx1]
        return Tile(level, (origin[0], origin[1]), (w, h), out, lv.downsample, self.slide_id)

    def read_window(self, window, level=0) -> Tile:
        x0, y0, x1, y1 = window
        ds = self.levels[level].downsample
        return self.read_region(
            level, (x0, y0), (max(1, round((x1 - x0) / ds)), max(1, round((y1 - y0) / ds)))
        )

    def read_tile(self, tw: TileWindow) -> Tile:
        return self.read_region(tw.level, tw.origin_level0, (tw.w, tw.h))


def _validate_levels(levels):
    if not levels:
        raise FormatError("at least one level required", field="levels")
    if levels[0].downsample != 1:
        raise FormatError("level 0 downsample must be 1", field="levels[0].downsample")
    for i, lv in enumerate(levels):
        if lv.width <= 0 or lv.height <= 0:
            raise FormatError("dimensions must be positive", field=f"levels[{i}]")
        if i == 0:
            continue
        prev = levels[i - 1]
        if lv.downsample <= prev.downsample:
            raise FormatError(
                "downsample must increase strictly", field=f"levels[{i}].downsample"
            )
        if lv.width > prev.width:
            raise FormatError(f"larger than level {i - 1}", field=f"levels[{i}].w")
        if lv.height > prev.height:
            raise FormatError(f"larger than level {i - 1}", field=f"levels[{i}].h")


def open_slide(path) -> SlidePyramid:
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"{path} is not a slide directory", field="path")
    mf = path / "manifest.json"
    if not mf.exists():
        raise FormatError(f"no manifest in {path}", field="manifest.json")
    try:
        meta = json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(str(e), field="manifest.json") from None
    if "levels" not in meta:
        raise FormatError("missing", field="levels")
    levels = []
    for i, entry in enumerate(meta["levels"]):
        for key in ("w", "h", "downsample", "file"):
            if key not in entry:
                raise FormatError("missing", field=f"levels[{i}].{key}")
        levels.append(Level(int(entry["w"]), int(entry["h"]), float(entry["downsample"]), entry["file"]))
    mpp = meta.get("mpp")
    if mpp is None:
        log.warning("%s: manifest has no mpp, assuming %.2f", path, DEFAULT_MPP)
        mpp = DEFAULT_MPP
    return SlidePyramid(levels, mpp, path=path, slide_id=meta.get("slide_id", path.name))


def iter_tiles(slide, level, tile_size, overlap=0):
    """Row-major tile windows at ``level`` covering every pixel at least once."""
    if tile_size <= 0 or overlap < 0 or overlap >= tile_size:
        raise ConfigError(f"need tile_size > overlap >= 0, got {tile_size}, {overlap}")
    lv = slide.levels[level]
    xs = _axis_starts(lv.width, tile_size, tile_size - overlap)
    ys = _axis_starts(lv.height, tile_size, tile_size - overlap)
    tw, th = min(tile_size, lv.width), min(tile_size, lv.height)
    return [TileWindow(level, x, y, tw, th, lv.downsample) for y in ys for x in xs]


def _axis_starts(extent, tile, stride):
    if extent <= tile:
        return [0]
    n = math.ceil((extent - tile) / stride) + 1
    return [min(i * stride, extent - tile) for i in range(n)]


def box_downsample(arr, factor):
    """Mean over ``factor x factor`` blocks, rounded half up; trailing pixels dropped."""
    factor = int(factor)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape[0] // factor, arr.shape[1] // factor
    blocks = arr[: h * factor, : w * factor].astype(np.uint32)
    blocks = blocks.reshape(h, factor, w, factor, -1).sum(axis=(1, 3))
    n = factor * factor
    return ((blocks + n // 2) // n).astype(np.uint8)


def write_pyramid(path, level0, mpp=DEFAULT_MPP, downsamples=PHANTOM_DOWNSAMPLES, slide_id=None):
    """Write a test pyramid built by box-downsampling ``level0``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    levels = []
    for k, ds in enumerate(downsamples):
        plane = box_downsample(level0, ds)
        name = f"level_{k}.png"
        Image.fromarray(plane, "RGB").save(path / name, compress_level=1)
        levels.append({"w": plane.shape[1], "h": plane.shape[0], "downsample": ds, "file": name})
    meta = {"mpp": mpp, "levels": levels}
    if slide_id is not None:
        meta["slide_id"] = slide_id
    (path / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return open_slide(path)


@dataclass
class PhantomTruth:
    circles: list
    dims: tuple
    seed: int
    slide_id: str = ""
    mask_files: list = field(default_factory=list)
    mask_origins: list = field(default_factory=list)
    root: Path = None

    def masks(self):
        """Per-circle binary disk masks with their level-0 origins."""
        out = []
        for f, origin in zip(self.mask_files, self.mask_origins):
            with Image.open(self.root / f) as im:
                out.append((tuple(origin), np.asarray(im) > 0))
        return out

    @property
    def glomeruli(self):
        return [(c, k) for c, k in self.circles if k is not GlomClass.NON_GLOMERULAR]

    def to_json(self):
        return {
            "seed": self.seed,
            "slide_id": self.slide_id,
            "dims": list(self.dims),
            "circles": [
                {
                    "cx": c.cx,
                    "cy": c.cy,
                    "r": c.r,
                    "class": k.value,
                    **({"mask": m, "mask_origin": list(o)} if m else {}),
                }
                for (c, k), m, o in zip(
                    self.circles,
                    self.mask_files or [None] * len(self.circles),
                    self.mask_origins or [None] * len(self.circles),
                )
            ],
        }

    @classmethod
    def load(cls, path) -> "PhantomTruth":
        path = Path(path)
        if path.is_dir():
            path = path / "truth.json"
        if not path.exists():
            raise FormatError(f"no phantom truth at {path}", field="truth.json")
        data = json.loads(path.read_text(encoding="utf-8"))
        circles, files, origins = [], [], []
        for i, c in enumerate(data["circles"]):
            try:
                circles.append((Circle(c["cx"], c["cy"], c["r"]), GlomClass.parse(c["class"])))
            except KeyError as e:
                raise FormatError("missing", field=f"circles[{i}].{e.args[0]}") from None
            if "mask" in c:
                files.append(c["mask"])
                origins.append(tuple(c["mask_origin"]))
        return cls(
            circles,
            tuple(data.get("dims", (0, 0))),
            int(data["seed"]),
            data.get("slide_id", path.parent.name),
            files,
            origins,
            path.parent,
        )


def draw_class_counts(seed, n, class_mix=None):
    """Per-class counts for ``n`` objects: one multinomial draw from the class stream.

    The class stream is ``np.random.default_rng([seed, 1])``, so the counts
    are reproducible outside the generator.
    """
    mix = _normalize_mix(class_mix)
    rng = np.random.default_rng([seed, 1])
    counts = rng.multinomial(n, [mix[c] for c in CLASS_ORDER])
    return dict(zip(CLASS_ORDER, (int(x) for x in counts))), rng


def _normalize_mix(class_mix):
    mix = dict(DEFAULT_CLASS_MIX if class_mix is None else class_mix)
    mix = {GlomClass(k) if isinstance(k, str) else k: float(v) for k, v in mix.items()}
    if any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
        raise ConfigError("class_mix weights must be non-negative with a positive sum")
    total = sum(mix.values())
    return {c: mix.get(c, 0.0) / total for c in CLASS_ORDER}


def _disk_coverage(c, x0, y0, x1, y1):
    """Fraction of each pixel in the box covered by the disk (supersampled)."""
    s = SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    inside = (xs[None, :] - c.cx) ** 2 + (ys[:, None] - c.cy) ** 2 <= c.r * c.r
    return inside.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))


def generate_phantom(
    seed,
    dims=(4096, 4096),
    n_glom=20,
    class_mix=None,
    out_dir=None,
    radius_range=DEFAULT_RADIUS_RANGE,
    mpp=DEFAULT_MPP,
    slide_id=None,
):
    """Render a phantom slide with ``n_glom`` class-coded disks.

    Returns ``(SlidePyramid, PhantomTruth)``. Output is a pure function of
    the arguments.
    """
    if n_glom < 0:
        raise ConfigError("n_glom must be non-negative")
    w, h = int(dims[0]), int(dims[1])
    rmin, rmax = float(radius_range[0]), float(radius_range[1])
    if not (0 < rmin <= rmax) or 2 * rmax >= min(w, h):
        raise ConfigError(f"radius range {radius_range} does not fit a {w}x{h} slide")
    ss = np.random.SeedSequence(seed)
    place_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    min_dist = 2.5 * rmax
    placed = []
    attempts = 0
    while len(placed) < n_glom:
        if attempts >= 10 * n_glom:
            raise PlacementError(
                f"placed {len(placed)} of {n_glom} circles in {attempts} attempts"
            )
        attempts += 1
        r = float(place_rng.uniform(rmin, rmax))
        cx = float(place_rng.uniform(r, w - r))
        cy = float(place_rng.uniform(r, h - r))
        if all(math.hypot(cx - p.cx, cy - p.cy) > min_dist for p in placed):
            placed.append(Circle(round(cx, 3), round(cy, 3), round(r, 3)))

    counts, class_rng = draw_class_counts(seed, n_glom, class_mix)
    labels = [c for c in CLASS_ORDER for _ in range(counts[c])]
    labels = [labels[i] for i in class_rng.permutation(n_glom)] if n_glom else []

    img = noise_rng.normal(0.0, NOISE_STD, size=(h, w)).astype(np.float32)
    img = img[:, :, None] + (BACKGROUND_INTENSITY + BACKGROUND_TINT).astype(np.float32)
    masks = []
    for c, k in zip(placed, labels):
        x0, y0 = math.floor(c.cx - c.r), math.floor(c.cy - c.r)
        x1, y1 = math.ceil(c.cx + c.r), math.ceil(c.cy + c.r)
        a = _disk_coverage(c, x0, y0, x1, y1)[:, :, None].astype(np.float32)
        fg = img[y0:y1, x0:x1] - BACKGROUND_INTENSITY - BACKGROUND_TINT + CLASS_INTENSITY[k] + TISSUE_TINT
        img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - a) + fg.astype(np.float32) * a
        masks.append(((x0, y0), a[:, :, 0] >= 0.5))
    level0 = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    slide_id = slide_id or (Path(out_dir).name if out_dir is not None else f"phantom_{seed}")
    truth = PhantomTruth(list(zip(placed, labels)), (w, h), int(seed), slide_id)
    if out_dir is None:
        levels, arrays = [], []
        for ds in PHANTOM_DOWNSAMPLES:
            plane = box_downsample(level0, ds)
            levels.append(Level(plane.shape[1], plane.shape[0], ds))
            arrays.append(plane)
        return SlidePyramid(levels, mpp, slide_id=slide_id, arrays=arrays), truth

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slide = write_pyramid(out, level0, mpp=mpp, slide_id=slide_id)
    (out / "masks").mkdir(exist_ok=True)
    for i, (origin, m) in enumerate(masks):
        name = f"masks/circle_{i:04d}.png"
        Image.fromarray(m.astype(np.uint8) * 255, "L").save(out / name)
        truth.mask_files.append(name)
        truth.mask_origins.append(origin)
    truth.root = out
    tmp = out / "truth.json.tmp"
    tmp.write_text(json.dumps(truth.to_json(), indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, out / "truth.json")
    return slide, truth


def truth_mask_in_patch(transform, circle):
    """Rasterize a level-0 circle onto a patch grid (pixel centers inside the disk)."""
    (sx, sy), (ox, oy) = transform.scale, transform.offset
    xs = transform.x0 + (np.arange(transform.out_w) + 0.5 - ox) / sx
    ys = transform.y0 + (np.arange(transform.out_h) + 0.5 - oy) / sy
    return (xs[None, :] - circle.cx) ** 2 + (ys[:, None] - circle.cy) ** 2 <= circle.r**2
