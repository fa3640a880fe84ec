"""ImageScope-compatible XML and JSON-lines outputs for slide-level results.

Each detection becomes an ellipse region (``Type="2"``) whose two vertices
are the corners of the circle's bounding box; score and class travel in the
region ``Text`` as ``score=S;class=C``. Coordinates are written with one
decimal, and :class:`Region` rounds circles to that grid on construction so
that parse(write(doc)) == doc holds exactly.
"""

import csv
import io
import json
import logging
import os
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, SchemaError
from .geometry import DEFAULT_MPP, Circle
from .taxonomy import CLASS_ORDER, GlomClass

log = logging.getLogger(__name__)

ELLIPSE = 2
UNCLASSIFIED = "unclassified"
COORD_DECIMALS = 1

# ImageScope colors are BGR integers.
LINE_COLORS = {
    GlomClass.NORMAL.value: 65280,
    GlomClass.OBSOLESCENT.value: 255,
    GlomClass.SOLIDIFIED.value: 16711680,
    GlomClass.DISAPPEARING.value: 65535,
    GlomClass.NON_GLOMERULAR.value: 8421504,
    UNCLASSIFIED: 16776960,
}
LAYER_ORDER = [c.value for c in CLASS_ORDER] + [UNCLASSIFIED]


def quantize(v: float) -> float:
    return round(float(v), COORD_DECIMALS) + 0.0


def quantize_circle(c: Circle) -> Circle:
    return Circle(quantize(c.cx), quantize(c.cy), quantize(c.r))


def class_name(label) -> str:
    return label.value if label is not None else UNCLASSIFIED


@dataclass(frozen=True)
class Region:
    id: int
    circle: Circle
    score: Optional[float] = None
    label: Optional[GlomClass] = None
    mask_ref: Optional[str] = None
    circular: bool = True

    def __post_init__(self):
        if self.id <= 0:
            raise SchemaError(f"region id must be positive, got {self.id}")
        object.__setattr__(self, "circle", quantize_circle(self.circle))


@dataclass(frozen=True)
class OpaqueRegion:
    """A non-ellipse region from a hand-made annotation, kept verbatim."""

    layer: str
    id: int
    type: int
    vertices: tuple
    text: str = ""


@dataclass
class AnnotationDoc:
    mpp: float = DEFAULT_MPP
    regions: list = field(default_factory=list)
    opaque: list = field(default_factory=list)
    dims: Optional[tuple] = None

    def __post_init__(self):
        if not self.mpp > 0:
            raise SchemaError("mpp must be positive")
        self.regions = sorted(self.regions, key=lambda r: r.id)
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate region ids")
        self.opaque = sorted(self.opaque, key=lambda o: (o.layer, o.id))

    def __eq__(self, other):
        if not isinstance(other, AnnotationDoc):
            return NotImplemented
        return (self.mpp, self.regions, self.opaque) == (other.mpp, other.regions, other.opaque)

    @classmethod
    def from_detections(cls, dets, mpp=DEFAULT_MPP, dims=None, start_id=1):
        regions = [
            Region(start_id + i, d.circle, d.score, d.label) for i, d in enumerate(dets)
        ]
        return cls(mpp, regions, dims=dims)

    def layers(self):
        """``[(layer name, regions)]`` for non-empty layers in canonical order."""
        groups = {}
        for r in self.regions:
            groups.setdefault(class_name(r.label), []).append(r)
        for o in self.opaque:
            groups.setdefault(o.layer, [])
        names = [n for n in LAYER_ORDER if n in groups] + sorted(n for n in groups if n not in LAYER_ORDER)
        return [(n, groups[n]) for n in names]

    def counts(self):
        out = {}
        for r in self.regions:
            out[class_name(r.label)] = out.get(class_name(r.label), 0) + 1
        return {n: out[n] for n in LAYER_ORDER if n in out}


def _fmt(v: float) -> str:
    return f"{v:.{COORD_DECIMALS}f}"


def _score_text(score) -> str:
    return "" if score is None else repr(float(score))


def write_imagescope_xml(doc: AnnotationDoc) -> bytes:
    root = ET.Element("Annotations", {"MicronsPerPixel": repr(float(doc.mpp))})
    for layer_id, (name, regions) in enumerate(doc.layers(), start=1):
        ann = ET.SubElement(
            root,
            "Annotation",
            {
                "Id": str(layer_id),
                "Name": name,
                "ReadOnly": "0",
                "LineColor": str(LINE_COLORS.get(name, 0)),
                "Visible": "1",
                "Type": "4",
            },
        )
        attrs = ET.SubElement(ann, "Attributes")
        ET.SubElement(attrs, "Attribute", {"Name": "class", "Value": name})
        regs = ET.SubElement(ann, "Regions")
        for r in regions:
            _check_bounds(r, doc.dims)
            el = ET.SubElement(
                regs,
                "Region",
                {
                    "Id": str(r.id),
                    "Type": str(ELLIPSE),
                    "Zoom": "1",
                    "Text": f"score={_score_text(r.score)};class={class_name(r.label)}",
                    "NegativeROA": "0",
                    "Analyze": "1",
                    "DisplayId": str(r.id),
                },
            )
            ra = ET.SubElement(el, "Attributes")
            if r.mask_ref is not None:
                ET.SubElement(ra, "Attribute", {"Name": "mask", "Value": r.mask_ref})
            if not r.circular:
                ET.SubElement(ra, "Attribute", {"Name": "circular", "Value": "0"})
            verts = ET.SubElement(el, "Vertices")
            c = r.circle
            for x, y in ((c.cx - c.r, c.cy - c.r), (c.cx + c.r, c.cy + c.r)):
                ET.SubElement(verts, "Vertex", {"X": _fmt(x), "Y": _fmt(y), "Z": "0"})
        for o in (o for o in doc.opaque if o.layer == name):
            el = ET.SubElement(
                regs,
                "Region",
                {"Id": str(o.id), "Type": str(o.type), "Zoom": "1", "Text": o.text},
            )
            ET.SubElement(el, "Attributes")
            verts = ET.SubElement(el, "Vertices")
            for x, y in o.vertices:
                ET.SubElement(verts, "Vertex", {"X": x, "Y": y, "Z": "0"})
        ET.SubElement(ann, "Plots")
    ET.indent(root, space="  ")
    body = ET.tostring(root, encoding="unicode", short_empty_elements=True)
    return ('<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n").encode("utf-8")


def _check_bounds(region, dims):
    if dims is None:
        return
    x0, y0, x1, y1 = region.circle.bbox()
    if x0 < 0 or y0 < 0 or x1 > dims[0] or y1 > dims[1]:
        log.warning("region %d extends beyond the %dx%d slide", region.id, dims[0], dims[1])


def _parse_text(text):
    fields = {}
    for part in (text or "").split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            fields[k.strip()] = v.strip()
    return fields


def parse_imagescope_xml(data) -> AnnotationDoc:
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        raise AnnotationParseError(str(e), line=e.position[0]) from None
    if root.tag != "Annotations":
        raise SchemaError(f"root element is <{root.tag}>, expected <Annotations>")
    mpp = float(root.get("MicronsPerPixel", DEFAULT_MPP))
    regions, opaque = [], []
    for ann in root.findall("Annotation"):
        layer = ann.get("Name", "")
        for reg in ann.iter("Region"):
            rid = int(reg.get("Id"))
            rtype = int(reg.get("Type", "0"))
            verts = [(v.get("X"), v.get("Y")) for v in reg.iter("Vertex")]
            if rtype != ELLIPSE:
                opaque.append(OpaqueRegion(layer, rid, rtype, tuple(verts), reg.get("Text", "")))
                continue
            if len(verts) != 2:
                raise SchemaError(f"ellipse region {rid} has {len(verts)} vertices, expected 2")
            (ax, ay), (bx, by) = ((float(x), float(y)) for x, y in verts)
            w, h = abs(bx - ax), abs(by - ay)
            circle = Circle((ax + bx) / 2, (ay + by) / 2, (w + h) / 4)
            text = _parse_text(reg.get("Text"))
            score = float(text["score"]) if text.get("score") else None
            cname = text.get("class", layer)
            label = GlomClass(cname) if cname in {c.value for c in CLASS_ORDER} else None
            attrs = {a.get("Name"): a.get("Value") for a in reg.iter("Attribute")}
            circular = abs(w - h) <= 10 ** -COORD_DECIMALS / 2 and attrs.get("circular") != "0"
            regions.append(Region(rid, circle, score, label, attrs.get("mask"), circular))
    return AnnotationDoc(mpp, regions, opaque)


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def png_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def detection_records(doc, wsi_id):
    return [
        {
            "wsi_id": wsi_id,
            "region_id": r.id,
            "cx": r.circle.cx,
            "cy": r.circle.cy,
            "r": r.circle.r,
            "score": r.score,
            "class": None if r.label is None else r.label.value,
        }
        for r in doc.regions
    ]


def detections_jsonl(doc, wsi_id) -> bytes:
    return "".join(json.dumps(rec) + "\n" for rec in detection_records(doc, wsi_id)).encode()


def read_detections_jsonl(path):
    """Load a ``detections.json`` file as ``{wsi_id: [Region, ...]}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                label = GlomClass(rec["class"]) if rec.get("class") else None
                region = Region(
                    int(rec["region_id"]),
                    Circle(rec["cx"], rec["cy"], rec["r"]),
                    rec.get("score"),
                    label,
                )
            except (KeyError, ValueError, TypeError) as e:
                raise AnnotationParseError(f"bad detection record: {e}", line=n) from None
            out.setdefault(rec.get("wsi_id", ""), []).append(region)
    return out


def patch_name(wsi_id, region) -> str:
    return f"{wsi_id}_{region.id}_{class_name(region.label)}.png"


def mask_name(wsi_id, region) -> str:
    return f"{wsi_id}_{region.id}_{class_name(region.label)}_mask.png"


def summary_csv(doc, wsi_id) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["wsi_id", "class", "count"])
    for name, n in doc.counts().items():
        w.writerow([wsi_id, name, n])
    return buf.getvalue().encode()


def write_results_json(doc, out_dir, wsi_id, patches=None, masks=None):
    """Write ``detections.json``, ``summary.csv`` and the patch/mask PNGs.

    ``patches`` and ``masks`` map region id -> pixel array. Returns the
    written paths.
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    atomic_write(out / "detections.json", detections_jsonl(doc, wsi_id))
    written.append(out / "detections.json")
    by_id = {r.id: r for r in doc.regions}
    for rid, arr in sorted((patches or {}).items()):
        p = out / "patches" / patch_name(wsi_id, by_id[rid])
        atomic_write(p, png_bytes(arr))
        written.append(p)
    for rid, arr in sorted((masks or {}).items()):
        p = out / "patches" / mask_name(wsi_id, by_id[rid])
        atomic_write(p, png_bytes(arr))
        written.append(p)
    atomic_write(out / "summary.csv", summary_csv(doc, wsi_id))
    written.append(out / "summary.csv")
    return written
