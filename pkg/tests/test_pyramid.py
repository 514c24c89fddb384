from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsiqc.errors import CorruptPyramid, MagnificationUnavailable, UnsupportedFormat
from wsiqc.imaging import PATCH, box_resample
from wsiqc.pyramid import is_white, iter_patches, open_slide, white_fraction, write_tiff, write_tile_tree


def bright_patch(n_bright: int, total=PATCH * PATCH):
    flat = np.full((total, 3), 100, dtype=np.uint8)
    flat[:n_bright] = 230
    return flat.reshape(PATCH, PATCH, 3)


@pytest.mark.parametrize("n,expect", [(209453, False), (209715, False), (209716, True), (209978, True)])
def test_white_threshold_on_full_patch(n, expect):
    # 80% of 512*512 is 209715.2
    assert is_white(bright_patch(n)) is expect


def test_exact_eighty_percent_is_content():
    # a 10x10 valid region gives an exact 80 / 100
    p = np.zeros((PATCH, PATCH, 3), dtype=np.uint8)
    p[:8, :10] = 255
    assert white_fraction(p, (10, 10)) == 0.8
    assert not is_white(p, (10, 10))
    p[8, 0] = 255
    assert is_white(p, (10, 10))


def test_bright_means_all_three_channels_above_200():
    p = np.full((4, 4, 3), 255, dtype=np.uint8)
    p[..., 2] = 200
    assert white_fraction(p) == 0.0


@pytest.fixture
def base_image(rng):
    return rng.integers(0, 256, (1100, 1300, 3), dtype=np.uint8)


@pytest.mark.parametrize("writer", ["tree", "tiff"])
def test_round_trip_and_grid_reads(tmp_path, base_image, writer):
    factors = (1, Fraction(1, 2))
    if writer == "tree":
        path = write_tile_tree(tmp_path / "s", base_image, factors, 20)
    else:
        path = write_tiff(tmp_path / "s.tif", base_image, factors, 20)
    slide = open_slide(path)
    assert (slide.width, slide.height) == (1300, 1100)
    g = slide.grid(20)
    assert (g.rows, g.cols) == (3, 3)
    p = g.read(2, 2)
    assert (p.valid_h, p.valid_w) == (1100 - 1024, 1300 - 1024)
    assert np.array_equal(p.valid_pixels, base_image[1024:, 1024:])
    assert not p.pixels[p.valid_h:].any() and not p.pixels[:, p.valid_w:].any()
    # 10x comes from the stored half level, 4x is resampled from it
    half = box_resample(base_image, Fraction(1, 2))
    assert np.array_equal(slide.grid(10).read(0, 1).valid_pixels, half[:512, 512:650])
    g4 = slide.grid(4)
    assert (g4.width, g4.height) == (int(650 * Fraction(2, 5)), int(550 * Fraction(2, 5)))
    assert np.array_equal(g4.read(0, 0).valid_pixels, box_resample(half, Fraction(2, 5)))


def test_patch_enumeration_is_row_major(tmp_path, base_image):
    slide = open_slide(write_tile_tree(tmp_path / "s", base_image, (1,), 20))
    assert [(p.i, p.j) for p in iter_patches(slide, 20)] == [(i, j) for i in range(3) for j in range(3)]


def test_magnification_above_base_is_rejected(tmp_path, base_image):
    slide = open_slide(write_tile_tree(tmp_path / "s", base_image[:600, :600], (1,), 20))
    with pytest.raises(MagnificationUnavailable):
        slide.grid(40)


def test_missing_and_corrupt_inputs(tmp_path, base_image):
    with pytest.raises(UnsupportedFormat):
        open_slide(tmp_path / "nope")
    (tmp_path / "x.jpg").write_bytes(b"")
    with pytest.raises(UnsupportedFormat):
        open_slide(tmp_path / "x.jpg")
    path = write_tile_tree(tmp_path / "s", base_image[:600, :600], (1,), 20)
    (path / "level_0" / "1_1.png").unlink()
    with pytest.raises(CorruptPyramid):
        open_slide(path)


@given(st.integers(1, 700), st.integers(1, 700))
def test_grid_covers_extent(h, w):
    from wsiqc.pyramid import Level, SlidePyramid

    class Blank:
        def read(self, k, y0, y1, x0, x1):
            return np.full((y1 - y0, x1 - x0, 3), 255, dtype=np.uint8)

    slide = SlidePyramid([Level(Fraction(1), w, h)], 20, Blank())
    g = slide.grid(20)
    assert g.rows * PATCH >= h > (g.rows - 1) * PATCH
    assert g.cols * PATCH >= w > (g.cols - 1) * PATCH
    p = g.read(g.rows - 1, g.cols - 1)
    assert p.is_white and p.white_fraction == 1.0


def test_level_sizes_round_down():
    from wsiqc.pyramid import level_sizes

    lv = level_sizes(8192, 8192, (1, Fraction(1, 5)))
    assert [(l.width, l.height) for l in lv] == [(8192, 8192), (1638, 1638)]


def test_single_patch_and_row_major_order(tmp_path):
    img = np.full((512, 512, 3), 255, np.uint8)
    s = open_slide(write_tile_tree(tmp_path / "a", img, (1,), 20))
    assert len(s.grid(20)) == 1 and not s.grid(20).read(0, 0).padded
    s2 = open_slide(write_tile_tree(tmp_path / "b", np.zeros((1024, 1024, 3), np.uint8), (1,), 20))
    assert s2.grid(20).coords() == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_white_fraction_points():
    assert white_fraction(np.zeros((8, 8, 3), np.uint8)) == 0.0
    assert white_fraction(np.full((8, 8, 3), 255, np.uint8)) == 1.0
    assert is_white(np.full((8, 8, 3), 255, np.uint8))
    cb = ((np.indices((8, 8)).sum(axis=0) % 2) * 255).astype(np.uint8)
    assert white_fraction(np.repeat(cb[..., None], 3, axis=2)) == 0.5
