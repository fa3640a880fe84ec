"""Regenerate the golden detection fixture; expected values come from the greedy oracle.

    cd tests && python3 fixtures/eval/make_fixture.py
"""

import json
import math
import sys

import numpy as np

sys.path.insert(0, ".")
from oracles import greedy_ap_oracle  # noqa: E402

from glomquant.geometry import Circle, circle_iou  # noqa: E402


def main():
    rng = np.random.default_rng(99)
    truth, pred = [], []

    def add_pred(wsi, cx, cy, r, score):
        n = sum(p["wsi_id"] == wsi for p in pred)
        pred.append({"wsi_id": wsi, "region_id": n + 1, "cx": cx, "cy": cy, "r": r, "score": score, "class": "normal"})

    for wsi in ("s1", "s2"):
        for i in range(6):
            c = [float(round(rng.uniform(100, 2000), 1)), float(round(rng.uniform(100, 2000), 1)), float(round(rng.uniform(10, 70), 1))]
            truth.append({"wsi_id": wsi, "region_id": i + 1, "cx": c[0], "cy": c[1], "r": c[2], "score": None, "class": "normal"})
            if rng.random() < 0.8:
                j = [round(v + rng.normal(0, 3), 1) for v in c]
                add_pred(wsi, j[0], j[1], max(1.0, j[2]), round(float(rng.uniform(0.3, 1)), 3))
        for _ in range(2):
            cx, cy = round(float(rng.uniform(0, 2000)), 1), round(float(rng.uniform(0, 2000)), 1)
            add_pred(wsi, cx, cy, 30.0, round(float(rng.uniform(0.3, 1)), 3))

    for name, rows in (("pred", pred), ("truth", truth)):
        with open(f"fixtures/eval/{name}_detections.json", "w") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in rows)
    gts = {}
    for t in truth:
        gts.setdefault(t["wsi_id"], []).append(Circle(t["cx"], t["cy"], t["r"]))
    dets = [(p["wsi_id"], p["score"], Circle(p["cx"], p["cy"], p["r"])) for p in pred]
    per = {}
    for i in range(10):
        thr = round(0.5 + 0.05 * i, 2)
        per[str(thr)] = greedy_ap_oracle(dets, gts, thr, circle_iou)
    exp = {"per_threshold": per, "ap": math.fsum(per.values()) / 10, "ap50": per["0.5"], "ap75": per["0.75"]}
    with open("fixtures/eval/expected_detection.json", "w") as fh:
        json.dump(exp, fh, indent=2)


if __name__ == "__main__":
    main()
