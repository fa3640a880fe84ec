"""Serve the mock backends over the stdio wire protocol.

    python -m glomquant.backends.server [--truth SLIDE_DIR]

Handles ``classify`` and ``segment``; ``detect`` needs ``--truth``.
"""

import argparse
import json
import sys

from ..geometry import CircleDetection
from ..wsi import PhantomTruth, Tile
from .external import decode_pixels, encode_mask
from .mock import MockClassifier, MockDetector, MockSegmenter


def handle(msg, detector=None):
    op = msg.get("op")
    pixels = decode_pixels(msg)
    if op == "classify":
        return {"probs": MockClassifier().classify(pixels).tolist()}
    if op == "segment":
        return {"mask": encode_mask(MockSegmenter().segment(pixels))}
    if op == "detect":
        if detector is None:
            raise ValueError("server started without --truth")
        meta = msg["meta"]
        h, w = pixels.shape[:2]
        tile = Tile(meta["level"], tuple(meta["origin"]), (w, h), pixels.copy(), meta["downsample"], meta["source"])
        dets = detector.detect(tile)
        return {"detections": [_det_json(d) for d in dets]}
    raise ValueError(f"unknown op {op!r}")


def _det_json(d: CircleDetection):
    c = d.circle
    return {"cx": c.cx, "cy": c.cy, "r": c.r, "score": d.score}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--truth", help="phantom slide directory (enables detect)")
    ap.add_argument("--sigma", type=float, default=0.0)
    ap.add_argument("--fp-rate", type=float, default=0.0)
    args = ap.parse_args(argv)
    detector = None
    if args.truth:
        detector = MockDetector(PhantomTruth.load(args.truth), args.sigma, args.fp_rate)
    out = sys.stdout
    for line in sys.stdin:
        if not line.strip():
            continue
        msg = json.loads(line)
        try:
            resp = {"id": msg["id"], **handle(msg, detector)}
        except Exception as e:  # reported to the client, not fatal
            resp = {"id": msg.get("id"), "error": str(e)}
        out.write(json.dumps(resp, separators=(",", ":")) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
