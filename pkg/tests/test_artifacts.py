import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsiqc.artifacts import SegMask, aggregate_occlusion, patch_occlusion, score_occlusion
from wsiqc.errors import MaskSizeMismatch, NotEvaluable, UnknownClass


def mask(i, j, rows, cls="marker"):
    b = np.zeros((512, 512), bool)
    b[:rows] = True
    return SegMask("x4", i, j, cls, b)


def test_ratio_and_aggregate():
    m = mask(0, 0, 128)
    assert patch_occlusion(m) == 0.25
    content = [("x4", 0, k) for k in range(10)]
    s = score_occlusion([m, mask(0, 1, 256), mask(0, 2, 512, "bubble")], "marker", content)
    assert s.quality == pytest.approx(1 - 0.75 / 10)
    assert s.detected_only_quality == pytest.approx(1 - 0.75 / 2)
    assert s.n_detected == 2


def test_masks_outside_content_are_ignored_and_overlaps_union():
    content = [("x4", 0, 0), ("x4", 0, 1)]
    a, b = mask(0, 0, 100), mask(0, 0, 200)
    s = score_occlusion([a, b, mask(5, 5, 512)], "marker", content)
    assert s.ratios == {("x4", 0, 0): 200 / 512}


def test_no_content_is_not_evaluable():
    s = score_occlusion([], "bubble", [])
    assert not s.evaluable
    with pytest.raises(NotEvaluable):
        aggregate_occlusion([], 0)


def test_bad_masks():
    with pytest.raises(MaskSizeMismatch):
        SegMask("x4", 0, 0, "marker", np.zeros((513, 512)))
    with pytest.raises(UnknownClass):
        SegMask("x4", 0, 0, "ink", np.zeros((512, 512)))


@given(st.lists(st.floats(0, 1), max_size=20), st.integers(0, 20))
def test_aggregate_bounds_and_monotone(ratios, extra):
    m = len(ratios) + extra
    if m == 0:
        return
    q = aggregate_occlusion(ratios, m)
    assert 0.0 <= q <= 1.0
    assert aggregate_occlusion(ratios, m + 1) >= q - 1e-12
    assert aggregate_occlusion([min(1.0, r + 0.1) for r in ratios], m) <= q + 1e-12


def test_patch_ratio_points():
    assert patch_occlusion(mask(0, 0, 0)) == 0.0
    assert patch_occlusion(mask(0, 0, 512)) == 1.0
    b = np.zeros((512, 512), bool)
    b[:, :256] = True
    assert patch_occlusion(SegMask("x4", 0, 0, "marker", b)) == 0.5


def test_slide_level_extremes():
    content = [("x4", 0, k) for k in range(4)]
    assert score_occlusion([], "marker", content).quality == 1.0
    full = [mask(0, k, 512) for k in range(4)]
    assert score_occlusion(full, "marker", content).quality == 0.0
