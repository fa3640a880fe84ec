import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glomquant.errors import ConfigError, FormatError, PlacementError
from glomquant.geometry import Circle, PatchTransform
from glomquant.taxonomy import CLASS_ORDER, GlomClass
from glomquant.wsi import (
    BACKGROUND_INTENSITY,
    CLASS_INTENSITY,
    WHITE,
    Level,
    PhantomTruth,
    SlidePyramid,
    box_downsample,
    draw_class_counts,
    generate_phantom,
    iter_tiles,
    open_slide,
    truth_mask_in_patch,
    write_pyramid,
)


def gradient_image(w, h):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([xx % 256, yy % 256, (xx + yy) % 256], axis=-1).astype(np.uint8)


def test_pyramid_round_trip(tmp_path):
    img = gradient_image(64, 40)
    slide = write_pyramid(tmp_path / "s", img, mpp=0.5)
    again = open_slide(tmp_path / "s")
    assert again.dimensions == (64, 40) and again.mpp == 0.5
    assert [lv.downsample for lv in again.levels] == [1, 2, 4]
    t = again.read_region(0, (3, 5), (10, 7))
    assert np.array_equal(t.pixels, img[5:12, 3:13])
    t2 = again.read_region(1, (8, 8), (4, 4))
    assert np.array_equal(t2.pixels, box_downsample(img, 2)[4:8, 4:8])
    assert slide.level_for_downsample(3.5) == 2


def test_outside_reads_are_white():
    img = gradient_image(16, 16)
    slide = SlidePyramid([Level(16, 16, 1)], arrays=[img])
    t = slide.read_region(0, (-4, 12), (8, 8))
    assert np.all(t.pixels[:, :4] == WHITE)
    assert np.all(t.pixels[4:] == WHITE)
    assert np.array_equal(t.pixels[:4, 4:], img[12:16, 0:4])
    with pytest.raises(IndexError):
        slide.read_region(3, (0, 0), (1, 1))


def test_box_downsample_rounds_half_up():
    a = np.array([[[0], [1]], [[0], [1]]], dtype=np.uint8)
    assert box_downsample(a, 2)[0, 0, 0] == 1  # mean 0.5 -> 1


def test_missing_mpp_warns(tmp_path, caplog):
    write_pyramid(tmp_path / "s", gradient_image(8, 8))
    meta = json.loads((tmp_path / "s" / "manifest.json").read_text())
    del meta["mpp"]
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(meta))
    with caplog.at_level(logging.WARNING):
        slide = open_slide(tmp_path / "s")
    assert slide.mpp == 0.25
    assert "no mpp" in caplog.text


@pytest.mark.parametrize(
    "levels, field",
    [
        ([], "levels"),
        ([{"w": 8, "h": 8, "downsample": 2, "file": "a.png"}], "levels[0].downsample"),
        ([{"w": 8, "h": 8, "downsample": 1}], "levels[0].file"),
        (
            [{"w": 8, "h": 8, "downsample": 1, "file": "a"}, {"w": 9, "h": 4, "downsample": 2, "file": "b"}],
            "levels[1].w",
        ),
    ],
)
def test_manifest_validation_names_field(tmp_path, levels, field):
    (tmp_path / "manifest.json").write_text(json.dumps({"mpp": 0.25, "levels": levels}))
    with pytest.raises(FormatError) as e:
        open_slide(tmp_path)
    assert e.value.field == field


def test_missing_level_file(tmp_path):
    write_pyramid(tmp_path, gradient_image(8, 8))
    (tmp_path / "level_1.png").unlink()
    slide = open_slide(tmp_path)
    with pytest.raises(FormatError):
        slide.read_region(1, (0, 0), (2, 2))


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(16, 600), st.integers(0, 15))
@settings(max_examples=100)
def test_tiles_cover_every_pixel(w, h, tile, overlap):
    slide = SlidePyramid([Level(w, h, 1)], arrays=[np.zeros((1, 1, 3), np.uint8)])
    tiles = iter_tiles(slide, 0, tile, overlap)
    for axis, extent in (("x", w), ("y", h)):
        size = "w" if axis == "x" else "h"
        spans = sorted({(getattr(t, axis), getattr(t, axis) + getattr(t, size)) for t in tiles})
        assert spans[0][0] == 0 and spans[-1][1] == extent
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert b0 <= a1  # no gaps
            assert b1 <= extent
    with pytest.raises(ConfigError):
        iter_tiles(slide, 0, 10, 10)


def test_phantom_is_deterministic_and_valid(tmp_path):
    s1, t1 = generate_phantom(5, (1024, 1024), 6, out_dir=tmp_path / "a", radius_range=(30, 50))
    s2, t2 = generate_phantom(5, (1024, 1024), 6, out_dir=tmp_path / "b", radius_range=(30, 50))
    assert (tmp_path / "a" / "level_0.png").read_bytes() == (tmp_path / "b" / "level_0.png").read_bytes()
    assert t1.circles == t2.circles
    counts, _ = draw_class_counts(5, 6)
    assert {c: sum(k is c for _, k in t1.circles) for c in CLASS_ORDER} == counts
    for i, (a, _) in enumerate(t1.circles):
        assert 30 <= a.r <= 50
        assert a.r <= a.cx <= 1024 - a.r
        for b, _ in t1.circles[i + 1 :]:
            assert math.hypot(a.cx - b.cx, a.cy - b.cy) > 2.5 * 50


def test_phantom_pixels_encode_class(tmp_path):
    slide, truth = generate_phantom(1, (1024, 1024), 6, radius_range=(40, 60))
    px = slide.read_region(0, (0, 0), (1024, 1024)).pixels.astype(float).mean(axis=2)
    for c, k in truth.circles:
        patch = px[int(c.cy) - 5 : int(c.cy) + 5, int(c.cx) - 5 : int(c.cx) + 5]
        assert abs(np.median(patch) - CLASS_INTENSITY[k]) < 6
    assert abs(np.median(px[:5, :5]) - BACKGROUND_INTENSITY) < 6


def test_phantom_masks_and_truth_file(tmp_path):
    _, truth = generate_phantom(2, (800, 800), 3, out_dir=tmp_path, radius_range=(30, 40))
    loaded = PhantomTruth.load(tmp_path)
    assert loaded.circles == truth.circles and loaded.slide_id == tmp_path.name
    for (origin, m), (c, _) in zip(loaded.masks(), loaded.circles):
        assert m.sum() == pytest.approx(math.pi * c.r**2, rel=0.03)
        ys, xs = np.nonzero(m)
        assert (xs.mean() + origin[0] + 0.5) == pytest.approx(c.cx, abs=0.5)


def test_phantom_class_mix_and_errors():
    _, t = generate_phantom(3, (600, 600), 4, {"disappearing": 1.0}, radius_range=(20, 30))
    assert {k for _, k in t.circles} == {GlomClass.DISAPPEARING}
    with pytest.raises(PlacementError):
        generate_phantom(0, (300, 300), 50, radius_range=(40, 50))
    with pytest.raises(ConfigError):
        generate_phantom(0, (100, 100), 1, radius_range=(40, 60))


def test_truth_mask_in_patch_area():
    c = Circle(1000, 2000, 100)
    t = PatchTransform(850, 1850, 1150, 2150)
    m = truth_mask_in_patch(t, c)
    assert m.shape == (256, 256)
    assert m.sum() == pytest.approx(math.pi * (100 * 256 / 300) ** 2, rel=0.01)
