from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsiqc.imaging import as_fraction, box_resample, box_resample_region, mag_label, parse_mag_label, to_gray


def brute_box(raster, scale: Fraction):
    """Area average by explicit overlap integration in exact rationals."""
    h, w = raster.shape[:2]
    oh, ow = int(h * scale), int(w * scale)
    inv = 1 / scale
    out = np.zeros((oh, ow, raster.shape[2]), dtype=np.uint8)
    for i in range(oh):
        for j in range(ow):
            y0, y1 = i * inv, (i + 1) * inv
            x0, x1 = j * inv, (j + 1) * inv
            acc = [Fraction(0)] * raster.shape[2]
            for y in range(int(y0), min(h, -int(-y1 // 1))):
                oy = min(y1, y + 1) - max(y0, y)
                if oy <= 0:
                    continue
                for x in range(int(x0), min(w, -int(-x1 // 1))):
                    ox = min(x1, x + 1) - max(x0, x)
                    if ox <= 0:
                        continue
                    for c in range(raster.shape[2]):
                        acc[c] += oy * ox * int(raster[y, x, c])
            area = inv * inv
            for c in range(raster.shape[2]):
                v = acc[c] / area
                out[i, j, c] = int(v + Fraction(1, 2))  # half up
    return out


def test_gray_bt601_integer_rounding():
    px = np.array([[[255, 255, 255], [0, 0, 0], [100, 150, 200], [1, 1, 1]]], dtype=np.uint8)
    g = to_gray(px)
    assert g.tolist() == [[255, 0, round(0.299 * 100 + 0.587 * 150 + 0.114 * 200), 1]]


def test_gray_of_neutral_pixels_is_identity():
    v = np.arange(256, dtype=np.uint8)
    assert np.array_equal(to_gray(np.stack([v, v, v], axis=-1)), v)


@pytest.mark.parametrize("scale", [Fraction(1, 2), Fraction(1, 5), Fraction(2, 5), Fraction(3, 7)])
def test_box_resample_matches_exact_area_oracle(rng, scale):
    raster = rng.integers(0, 256, (23, 19, 3), dtype=np.uint8)
    assert np.array_equal(box_resample(raster, scale), brute_box(raster, scale))


@given(
    st.integers(0, 10_000),
    st.sampled_from([Fraction(1, 2), Fraction(1, 5), Fraction(2, 3)]),
    st.integers(1, 20),
    st.integers(1, 20),
)
def test_resampling_any_tiling_is_bit_identical(seed, scale, ty, tx):
    rng = np.random.default_rng(seed)
    raster = rng.integers(0, 256, (60, 50, 3), dtype=np.uint8)
    full = box_resample(raster, scale)
    oh, ow = full.shape[:2]

    def read(ya, yb, xa, xb):
        return raster[ya:yb, xa:xb]

    tiled = np.zeros_like(full)
    for y0 in range(0, oh, ty):
        for x0 in range(0, ow, tx):
            y1, x1 = min(oh, y0 + ty), min(ow, x0 + tx)
            tiled[y0:y1, x0:x1] = box_resample_region(read, raster.shape[:2], scale, y0, y1, x0, x1)
    assert np.array_equal(tiled, full)


def test_identity_scale_returns_input(rng):
    raster = rng.integers(0, 256, (8, 9, 3), dtype=np.uint8)
    assert np.array_equal(box_resample(raster, 1), raster)


@pytest.mark.parametrize("mag,label", [(4, "x4"), (20, "x20"), (Fraction(5, 2), "x5-2"), (2.5, "x5-2")])
def test_mag_labels_round_trip(mag, label):
    assert mag_label(mag) == label
    assert parse_mag_label(label) == as_fraction(mag)


def test_bad_label():
    with pytest.raises(ValueError):
        parse_mag_label("20x")
