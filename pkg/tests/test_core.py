import math

import pytest
from hypothesis import given, strategies as st

from hoiagent.core import BBox, HOITriplet, ImageRecord, box_in_frame, iou, normalize_label

coord = st.floats(min_value=0, max_value=1e4, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, positive=False):
    x1, y1 = draw(coord), draw(coord)
    lo = 1e-3 if positive else 0.0
    w = draw(st.floats(min_value=lo, max_value=1e3))
    h = draw(st.floats(min_value=lo, max_value=1e3))
    return BBox(x1, y1, x1 + w, y1 + h)


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, BBox(0, 0, 10, 10)) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_zero_area_boxes_score_zero():
    z = BBox(5, 5, 5, 5)
    assert iou(z, z) == 0.0
    assert iou(z, BBox(0, 0, 10, 10)) == 0.0
    line = BBox(0, 0, 10, 0)
    assert iou(line, line) == 0.0


def test_touching_edges_do_not_intersect():
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes(positive=True))
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


@given(boxes(positive=True), boxes(positive=True), st.integers(0, 500), st.integers(0, 500))
def test_iou_translation_invariant(a, b, dx, dy):
    # sides of at least 1e-3 survive the shift; compare with a tolerance
    assert math.isclose(iou(a, b), iou(a.translate(dx, dy), b.translate(dx, dy)), abs_tol=1e-6)


@pytest.mark.parametrize("raw,expected", [
    ("Baseball_Bat ", "baseball bat"),
    ("ride", "ride"),
    ("  Tennis   Racket", "tennis racket"),
    ("HOT\tdog\n", "hot dog"),
    ("__a__b__", "a b"),
])
def test_normalize_label(raw, expected):
    assert normalize_label(raw) == expected


@pytest.mark.parametrize("raw", ["", "   ", "___", "\t\n"])
def test_normalize_rejects_empty(raw):
    with pytest.raises(ValueError):
        normalize_label(raw)


@given(st.text(min_size=1).filter(lambda s: s.replace("_", " ").strip()))
def test_normalize_idempotent(s):
    once = normalize_label(s)
    assert normalize_label(once) == once


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(10, 0, 5, 10)
    with pytest.raises(ValueError):
        BBox(-1, 0, 5, 10)
    with pytest.raises(ValueError):
        BBox(0, 0, float("nan"), 1)
    assert BBox(1.5, 2.25, 3.5, 4.75).area == pytest.approx(2.0 * 2.5)
    assert BBox.from_seq([1, 2, 3, 4]).as_list() == [1.0, 2.0, 3.0, 4.0]


def test_triplet_normalizes_and_checks_score():
    t = HOITriplet("Ride_", " BICYCLE", BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), 0.5)
    assert t.category == ("ride", "bicycle")
    assert HOITriplet.from_dict(t.to_dict()) == t
    with pytest.raises(ValueError):
        HOITriplet("ride", "bicycle", BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), 1.5)


def test_image_record_frame_check():
    t = HOITriplet("ride", "bicycle", BBox(0, 0, 50, 100), BBox(30, 40, 90, 100))
    rec = ImageRecord("x", 100, 100, (t,))
    assert ImageRecord.from_dict(rec.to_dict()) == rec
    with pytest.raises(ValueError):
        ImageRecord("x", 80, 100, (t,))
    with pytest.raises(ValueError):
        ImageRecord("x", 0, 100)
    assert box_in_frame(BBox(0, 0, 100, 100), 100, 100)
    assert not box_in_frame(BBox(0, 0, 105, 100), 100, 100)
