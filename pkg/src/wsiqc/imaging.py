"""Small raster helpers: BT.601 gray, exact box resampling, PNG io."""
from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from PIL import Image

PATCH = 512


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """round(0.299 R + 0.587 G + 0.114 B), computed in integers (half rounds up)."""
    rgb = np.asarray(rgb)
    if rgb.dtype.kind == "f":
        g = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        return np.floor(g + 0.5)
    r = rgb[..., 0].astype(np.int64)
    gch = rgb[..., 1].astype(np.int64)
    b = rgb[..., 2].astype(np.int64)
    return ((299 * r + 587 * gch + 114 * b + 500) // 1000).astype(np.uint8)


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10_000)
    return Fraction(value)


def mag_label(mag) -> str:
    """Patch-grid label used in artifact files: x4, x20, x5-2 for 2.5x."""
    mag = as_fraction(mag)
    if mag.denominator == 1:
        return f"x{mag.numerator}"
    return f"x{mag.numerator}-{mag.denominator}"


def parse_mag_label(label: str) -> Fraction:
    if not label.startswith("x"):
        raise ValueError(f"bad magnification label {label!r}")
    body = label[1:]
    if "-" in body:
        num, den = body.split("-", 1)
        return Fraction(int(num), int(den))
    return Fraction(int(body))


def _area_weights(n_src: int, scale: Fraction, d0: int, d1: int):
    """Integer box-filter weights mapping source [s0, s1) onto output [d0, d1).

    With scale = p/q, output pixel k covers source interval [k q/p, (k+1) q/p).
    Weights are overlaps measured in units of 1/p so they are integers; the
    normalisation constant for one axis is q.
    """
    p, q = scale.numerator, scale.denominator
    s0 = (d0 * q) // p
    s1 = min(n_src, -((-d1 * q) // p))
    rows, cols, vals = [], [], []
    for k in range(d0, d1):
        lo, hi = k * q, (k + 1) * q
        j0, j1 = lo // p, min(n_src, -(-hi // p))
        for j in range(j0, j1):
            ov = min(hi, (j + 1) * p) - max(lo, j * p)
            if ov > 0:
                rows.append(k - d0)
                cols.append(j - s0)
                vals.append(ov)
    w = sp.csr_matrix(
        (np.asarray(vals, dtype=np.int64), (rows, cols)), shape=(d1 - d0, s1 - s0)
    )
    return s0, s1, w, q


def box_resample_region(read_src, src_shape, scale: Fraction, y0, y1, x0, x1) -> np.ndarray:
    """Area-average resample of output rows [y0,y1) x cols [x0,x1).

    ``read_src(ya, yb, xa, xb)`` returns the uint8 source region. Arithmetic is
    exact integer, so any tiling of the output gives bit-identical pixels.
    """
    h_src, w_src = src_shape
    sy0, sy1, wy, qy = _area_weights(h_src, scale, y0, y1)
    sx0, sx1, wx, qx = _area_weights(w_src, scale, x0, x1)
    src = read_src(sy0, sy1, sx0, sx1).astype(np.int64)
    out = np.empty((y1 - y0, x1 - x0, src.shape[2]), dtype=np.uint8)
    # weights are overlaps in 1/p units and sum to q along each axis
    denom = qy * qx
    for c in range(src.shape[2]):
        t = wy @ src[:, :, c]
        t = (wx @ t.T).T
        out[:, :, c] = np.clip(_round_div(np.asarray(t), denom), 0, 255)
    return out


def _round_div(num: np.ndarray, den: int) -> np.ndarray:
    return (2 * num + den) // (2 * den)


def box_resample(raster: np.ndarray, scale) -> np.ndarray:
    """Whole-raster area-average resample; output size floor(dim * scale)."""
    scale = as_fraction(scale)
    h, w = raster.shape[:2]
    oh, ow = int(h * scale), int(w * scale)

    def read(ya, yb, xa, xb):
        return raster[ya:yb, xa:xb]

    return box_resample_region(read, (h, w), scale, 0, oh, 0, ow)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=bool)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype == bool:
        Image.fromarray(array).convert("1").save(path, optimize=False)
    else:
        Image.fromarray(np.ascontiguousarray(array)).save(path, compress_level=1)
