import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsiqc.errors import DegenerateCalibration, InsufficientBackground, TooFewSamples
from wsiqc.grid import (
    BackgroundStats,
    GridCalibration,
    calibrate_grid,
    compute_q1,
    patch_mean_var,
    select_content_free_patches,
)


def stats(vals, padded=False):
    return [BackgroundStats(k, k, 0.99, padded, 236.0, v) for k, v in enumerate(vals)]


def test_q1_point_values():
    cal = GridCalibration(10.0, 12.0, 50)
    assert compute_q1(stats([10] * 5), cal).q1 == 1.0
    assert compute_q1(stats([15] * 5), cal).q1 == pytest.approx(0.5, abs=1e-12)
    assert compute_q1(stats([5] * 5), cal).q1 == pytest.approx(0.5, abs=1e-12)
    assert compute_q1(stats([40] * 5), cal).q1 == 0.0
    m = compute_q1(stats([8, 9, 10, 11, 17]), cal)
    assert m.v_wsi == pytest.approx(11.0)
    assert m.q1 == pytest.approx(0.9)


def test_patch_variance_is_population_variance(rng):
    g = rng.integers(0, 256, (37, 41))
    mean, var = patch_mean_var(g)
    assert mean == pytest.approx(g.mean())
    assert var == pytest.approx(g.var(ddof=0))


def test_seamed_background_lowers_q1(rng):
    # background noise sigma 3 calibrates near 9; a darkened 4 px seam every 128 px raises variance
    ref = [np.clip(np.floor(236 + rng.normal(0, 3, (512, 512)) + 0.5), 0, 255) for _ in range(40)]
    cal = calibrate_grid(ref)
    clean = [BackgroundStats(k, k, 0.99, False, *patch_mean_var(ref[k])) for k in range(5)]
    assert compute_q1(clean, cal).q1 > 0.95
    seamed = []
    for k in range(5):
        g = ref[k].copy()
        for s in range(0, 512, 128):
            g[s:s + 4] -= 8
            g[:, s:s + 4] -= 8
        seamed.append(BackgroundStats(k, k, 0.99, False, *patch_mean_var(g)))
    assert compute_q1(seamed, cal).q1 < compute_q1(clean, cal).q1 - 0.3


def test_calibration_estimates_noise_variance(rng):
    sigma = 4.0
    patches = [rng.normal(200, sigma, (256, 256)) for _ in range(689)]
    cal = calibrate_grid(patches)
    assert abs(cal.v_nogrid - sigma ** 2) / sigma ** 2 < 0.05
    assert cal.sample_count == 689
    assert GridCalibration.from_json(cal.to_json()) == cal


def test_calibration_errors():
    with pytest.raises(TooFewSamples):
        calibrate_grid([np.zeros((4, 4))] * 29)
    with pytest.raises(DegenerateCalibration):
        calibrate_grid([np.zeros((4, 4))] * 30)


def test_selection_needs_five():
    with pytest.raises(InsufficientBackground):
        select_content_free_patches(stats([1, 2, 3, 4]), 4, 4)


def test_selection_prefers_whitest_and_unpadded():
    c = [BackgroundStats(i, j, 0.9, False, 0, 0) for i in range(4) for j in range(4)]
    c[5] = BackgroundStats(1, 1, 1.0, False, 0, 0)
    c.append(BackgroundStats(4, 4, 1.0, True, 0, 0))
    chosen = select_content_free_patches(c, 5, 5)
    assert (1, 1) in [(s.i, s.j) for s in chosen]
    assert all(not s.padded for s in chosen)


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7), st.floats(0.81, 1.0)), min_size=5, max_size=40,
                unique_by=lambda t: (t[0], t[1])), st.randoms())
def test_selection_independent_of_order(cands, rnd):
    items = [BackgroundStats(i, j, f, False, 0, 0) for i, j, f in cands]
    a = select_content_free_patches(items, 8, 8)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    b = select_content_free_patches(shuffled, 8, 8)
    assert [(s.i, s.j) for s in a] == [(s.i, s.j) for s in b]
    assert len({(s.i, s.j) for s in a}) == 5


@given(st.lists(st.floats(0, 1000), min_size=5, max_size=5), st.floats(0.01, 500))
def test_q1_in_unit_interval(vals, v0):
    q = compute_q1(stats(vals), GridCalibration(v0, v0, 30)).q1
    assert 0.0 <= q <= 1.0


def test_mean_var_points(rng):
    assert patch_mean_var(np.full((16, 16), 128)) == (128.0, 0.0)
    alt = np.tile([0, 255], (16, 8))
    assert patch_mean_var(alt) == (127.5, 16256.25)
    g = rng.integers(0, 256, (512, 512))
    mean = sum(float(v) for v in g.ravel()) / g.size
    var = sum((float(v) - mean) ** 2 for v in g.ravel()) / g.size
    m2, v2 = patch_mean_var(g)
    assert abs(m2 - mean) / mean < 1e-9 and abs(v2 - var) / var < 1e-9


def test_fully_white_slide_picks_corners_and_centre():
    c = [BackgroundStats(i, j, 1.0, False, 236, 9) for i in range(5) for j in range(5)]
    chosen = select_content_free_patches(c, 5, 5)
    assert [(s.i, s.j) for s in chosen] == [(0, 0), (0, 4), (4, 0), (4, 4), (2, 2)]


def test_q1_boundaries():
    cal = GridCalibration(7.0, 8.0, 40)
    assert compute_q1(stats([7.0] * 5), cal).q1 == 1.0
    assert compute_q1(stats([14.0] * 5), cal).q1 == 0.0
