import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import greedy_ap_oracle
from glomquant.errors import ShapeError, UndefinedMetricError
from glomquant.geometry import Circle, CircleDetection, circle_iou
from glomquant.metrics import (
    EvalReport,
    auc,
    average_precision,
    average_precision_at,
    balanced_accuracy,
    confusion_matrix,
    dice,
    dice_stats,
    excluded_classes,
    macro_f1,
)


def pixel_dice(a, b):
    inter = total = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x) and bool(y)
        total += bool(x) + bool(y)
    return 1.0 if total == 0 else 2 * inter / total


def test_perfect_ap():
    gts = {"s": [Circle(100, 100, 10), Circle(300, 100, 40)]}
    dets = {"s": [CircleDetection(c, 0.9) for c in gts["s"]]}
    res = average_precision(dets, gts)
    assert res["ap"] == res["ap50"] == res["ap75"] == 1.0
    assert res["ap_small"] == 1.0 and res["ap_medium"] == 1.0


def test_undefined_bucket_is_none():
    gts = {"s": [Circle(100, 100, 80)]}  # area above the medium range
    res = average_precision({"s": [CircleDetection(gts["s"][0], 0.5)]}, gts)
    assert res["ap_small"] is None and res["ap_medium"] is None
    assert average_precision_at({}, {}, 0.5) is None


def test_no_detections_gives_zero():
    assert average_precision_at({}, {"s": [Circle(0, 0, 5)]}, 0.5) == 0.0


def test_half_recall():
    gts = {"s": [Circle(0, 0, 10), Circle(100, 0, 10)]}
    dets = {"s": [CircleDetection(Circle(0, 0, 10), 0.9)]}
    # Recall 0.5 at precision 1: grid points 0..0.50 are covered.
    assert average_precision_at(dets, gts, 0.5) == pytest.approx(51 / 101)


circ = st.builds(Circle, st.floats(0, 30), st.floats(0, 30), st.floats(2, 10))


@given(
    st.lists(st.tuples(st.sampled_from("ab"), st.floats(0.01, 1), circ), max_size=6),
    st.lists(st.tuples(st.sampled_from("ab"), circ), max_size=4),
    st.sampled_from([0.5, 0.75, 0.95]),
)
def test_ap_matches_oracle(dets, gts, thr):
    scores = [s for _, s, _ in dets]
    if len(set(scores)) != len(scores):
        return
    d_map, g_map = {}, {}
    for img, s, c in dets:
        d_map.setdefault(img, []).append(CircleDetection(c, s))
    for img, c in gts:
        g_map.setdefault(img, []).append(c)
    assert average_precision_at(d_map, g_map, thr) == greedy_ap_oracle(dets, g_map, thr, circle_iou)


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_dice_matches_pixel_count(seed, h, w):
    rng = np.random.default_rng(seed)
    a, b = rng.random((h, w)) < 0.4, rng.random((h, w)) < 0.4
    assert dice(a, b) == pytest.approx(pixel_dice(a, b), abs=1e-15)
    assert dice(a, b) == dice(b, a)
    assert dice(a, a) == 1.0


def test_dice_edge_cases():
    z = np.zeros((4, 4), bool)
    assert dice(z, z) == 1.0
    assert dice(z, ~z) == 0.0
    with pytest.raises(ShapeError):
        dice(z, np.zeros((3, 3)))
    assert dice_stats([0.9, 1.0]) == (pytest.approx(0.95), pytest.approx(0.05))


def test_balanced_accuracy_and_f1_by_hand():
    cm = np.array([[8, 2, 0], [1, 3, 0], [0, 0, 0]])
    assert excluded_classes(cm) == [2]
    assert balanced_accuracy(cm) == pytest.approx((0.8 + 0.75) / 2)
    f1_0 = 2 * 8 / (10 + 9)
    f1_1 = 2 * 3 / (4 + 5)
    assert macro_f1(cm) == pytest.approx((f1_0 + f1_1) / 2)


def test_confusion_errors():
    with pytest.raises(UndefinedMetricError):
        balanced_accuracy(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        balanced_accuracy(np.zeros((2, 3)))


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    pos = [s for s, y in pairs if y]
    neg = [s for s, y in pairs if not y]
    if not pos or not neg:
        with pytest.raises(UndefinedMetricError):
            auc(scores, labels)
        return
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert auc(scores, labels) == pytest.approx(wins / (len(pos) * len(neg)))


def test_report_json_and_table():
    r = EvalReport(ap=0.5, ap50=0.75, dice_mean=0.9, dice_std=0.01, balanced_accuracy=0.8, macro_f1=0.7)
    assert EvalReport.from_json(r.to_json()) == r
    table = r.table()
    for head in ("AP", "AP50", "APS", "DSC", "Balance acc", "F1"):
        assert head in table
    assert "n/a" in table
    assert json.loads(r.to_json())["ap"] == 0.5
