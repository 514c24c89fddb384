"""Pyramidal slide access: container readers/writers, patch enumeration, white filter.

Two containers are supported:

* tile-tree: ``manifest.json`` plus ``level_<k>/<i>_<j>.png`` tiles of 512 px
  (row ``i``, column ``j``; edge tiles stored cropped to the level extent).
* tiled TIFF: one page per level, 512 px tiles, page description holding
  ``{"factor": "1/5", "base_magnification": 20}`` as JSON.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CorruptPyramid, MagnificationUnavailable, UnsupportedFormat
from .imaging import PATCH, as_fraction, box_resample_region, mag_label, read_png, write_png

WHITE_LEVEL = 200
WHITE_FRACTION = Fraction(4, 5)


@dataclass(frozen=True)
class Level:
    factor: Fraction
    width: int
    height: int


@dataclass(frozen=True)
class PatchRecord:
    magnification: Fraction
    i: int
    j: int
    pixels: np.ndarray = field(repr=False)
    valid_h: int
    valid_w: int
    white_fraction: float
    is_white: bool

    @property
    def label(self) -> str:
        return mag_label(self.magnification)

    @property
    def padded_fraction(self) -> float:
        return 1.0 - (self.valid_h * self.valid_w) / float(PATCH * PATCH)

    @property
    def padded(self) -> bool:
        return self.valid_h < PATCH or self.valid_w < PATCH

    @property
    def valid_pixels(self) -> np.ndarray:
        return self.pixels[: self.valid_h, : self.valid_w]

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.label, self.i, self.j)


def _bright_count(pixels: np.ndarray, valid_shape=None) -> tuple[int, int]:
    if valid_shape is not None:
        pixels = pixels[: valid_shape[0], : valid_shape[1]]
    n = pixels.shape[0] * pixels.shape[1]
    bright = int(np.count_nonzero(pixels.min(axis=2) > WHITE_LEVEL))
    return bright, n


def white_fraction(pixels: np.ndarray, valid_shape: tuple[int, int] | None = None) -> float:
    """Fraction of (non-padding) pixels whose three channels all exceed 200."""
    bright, n = _bright_count(pixels, valid_shape)
    return bright / n if n else 0.0


def is_white(pixels: np.ndarray, valid_shape: tuple[int, int] | None = None) -> bool:
    bright, n = _bright_count(pixels, valid_shape)
    # strict "more than 80%", compared in integers
    return n > 0 and bright * WHITE_FRACTION.denominator > n * WHITE_FRACTION.numerator


class _TileTreeSource:
    def __init__(self, root: Path, levels: Sequence[Level], tile: int):
        self.root = root
        self.levels = levels
        self.tile = tile

    def tile_path(self, k: int, i: int, j: int) -> Path:
        return self.root / f"level_{k}" / f"{i}_{j}.png"

    def check(self) -> None:
        for k, lv in enumerate(self.levels):
            for i in range(math.ceil(lv.height / self.tile)):
                for j in range(math.ceil(lv.width / self.tile)):
                    if not self.tile_path(k, i, j).is_file():
                        raise CorruptPyramid(f"missing tile {self.tile_path(k, i, j)}")

    def read(self, k: int, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
        t = self.tile
        lv = self.levels[k]
        out = np.zeros((y1 - y0, x1 - x0, 3), dtype=np.uint8)
        for i in range(y0 // t, (y1 - 1) // t + 1):
            for j in range(x0 // t, (x1 - 1) // t + 1):
                tile = read_png(self.tile_path(k, i, j))
                eh, ew = min(t, lv.height - i * t), min(t, lv.width - j * t)
                if tile.shape[:2] != (eh, ew):
                    raise CorruptPyramid(
                        f"tile level_{k}/{i}_{j} has shape {tile.shape[:2]}, expected {(eh, ew)}"
                    )
                ty0, tx0 = i * t, j * t
                ya, yb = max(y0, ty0), min(y1, ty0 + eh)
                xa, xb = max(x0, tx0), min(x1, tx0 + ew)
                out[ya - y0 : yb - y0, xa - x0 : xb - x0] = tile[ya - ty0 : yb - ty0, xa - tx0 : xb - tx0]
        return out


class _TiffSource:
    def __init__(self, path: Path, levels: Sequence[Level]):
        self.path = path
        self.levels = levels
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def check(self) -> None:
        pass

    def _level(self, k: int) -> np.ndarray:
        with self._lock:
            if k not in self._cache:
                import tifffile

                with tifffile.TiffFile(self.path) as tf:
                    arr = tf.pages[k].asarray()
                lv = self.levels[k]
                if arr.shape[:2] != (lv.height, lv.width) or arr.ndim != 3:
                    raise CorruptPyramid(f"page {k} shape {arr.shape} disagrees with its tags")
                self._cache[k] = arr[..., :3].astype(np.uint8, copy=False)
            return self._cache[k]

    def read(self, k: int, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
        arr = self._level(k)
        out = np.zeros((y1 - y0, x1 - x0, 3), dtype=np.uint8)
        yb, xb = min(y1, arr.shape[0]), min(x1, arr.shape[1])
        out[: yb - y0, : xb - x0] = arr[y0:yb, x0:xb]
        return out


class SlidePyramid:
    """Read-only multi-resolution slide. Safe to share across threads."""

    def __init__(self, levels: Sequence[Level], base_magnification, source, name: str = "slide"):
        self.levels = list(levels)
        self.base_magnification = as_fraction(base_magnification)
        self._source = source
        self.name = name
        _validate_levels(self.levels)

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    def read_region(self, k: int, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
        """Pixels of level ``k``; rows/cols beyond the level extent are zero."""
        lv = self.levels[k]
        yb, xb = min(y1, lv.height), min(x1, lv.width)
        out = np.zeros((y1 - y0, x1 - x0, 3), dtype=np.uint8)
        if yb > y0 and xb > x0:
            out[: yb - y0, : xb - x0] = self._source.read(k, y0, yb, x0, xb)
        return out

    def grid(self, mag) -> "PatchGrid":
        mag = as_fraction(mag)
        if mag <= 0:
            raise MagnificationUnavailable(f"magnification must be positive, got {mag}")
        factor = mag / self.base_magnification
        if factor > 1:
            raise MagnificationUnavailable(
                f"{float(mag):g}x requested but slide base is {float(self.base_magnification):g}x"
            )
        candidates = [k for k, lv in enumerate(self.levels) if lv.factor >= factor]
        k = min(candidates, key=lambda idx: self.levels[idx].factor)
        lv = self.levels[k]
        scale = factor / lv.factor
        if scale == 1:
            w, h = lv.width, lv.height
        else:
            w, h = int(lv.width * scale), int(lv.height * scale)
        return PatchGrid(self, mag, k, scale, w, h)

    def read_patch(self, mag, i: int, j: int) -> PatchRecord:
        return self.grid(mag).read(i, j)


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping 512 px tiling of one slide at one magnification."""

    slide: SlidePyramid
    magnification: Fraction
    level: int
    scale: Fraction
    width: int
    height: int

    @property
    def rows(self) -> int:
        return math.ceil(self.height / PATCH)

    @property
    def cols(self) -> int:
        return math.ceil(self.width / PATCH)

    def __len__(self) -> int:
        return self.rows * self.cols

    def coords(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.rows) for j in range(self.cols)]

    def read_raw(self, i: int, j: int) -> tuple[np.ndarray, int, int]:
        y0, x0 = i * PATCH, j * PATCH
        vh, vw = min(PATCH, self.height - y0), min(PATCH, self.width - x0)
        if self.scale == 1:
            px = self.slide.read_region(self.level, y0, y0 + PATCH, x0, x0 + PATCH)
        else:
            lv = self.slide.levels[self.level]

            def src(ya, yb, xa, xb):
                return self.slide.read_region(self.level, ya, yb, xa, xb)

            region = box_resample_region(src, (lv.height, lv.width), self.scale, y0, y0 + vh, x0, x0 + vw)
            px = np.zeros((PATCH, PATCH, 3), dtype=np.uint8)
            px[:vh, :vw] = region
        px[vh:] = 0
        px[:, vw:] = 0
        return px, vh, vw

    def read(self, i: int, j: int) -> PatchRecord:
        px, vh, vw = self.read_raw(i, j)
        bright, n = _bright_count(px, (vh, vw))
        return PatchRecord(
            magnification=self.magnification,
            i=i,
            j=j,
            pixels=px,
            valid_h=vh,
            valid_w=vw,
            white_fraction=bright / n,
            is_white=bright * WHITE_FRACTION.denominator > n * WHITE_FRACTION.numerator,
        )


def iter_patches(slide: SlidePyramid, mag) -> Iterator[PatchRecord]:
    """Row-major stream of every patch at ``mag``, each classified white/content."""
    grid = slide.grid(mag)
    for i, j in grid.coords():
        yield grid.read(i, j)


def _validate_levels(levels: Sequence[Level]) -> None:
    if not levels:
        raise CorruptPyramid("slide has no levels")
    base = levels[0]
    if base.factor != 1:
        raise CorruptPyramid("first level must have factor 1")
    for prev, cur in zip(levels, levels[1:]):
        if not cur.factor < prev.factor:
            raise CorruptPyramid("levels must strictly decrease in resolution")
    for lv in levels:
        if lv.factor <= 0:
            raise CorruptPyramid("level factors must be positive")
        ew, eh = int(base.width * lv.factor), int(base.height * lv.factor)
        if (lv.width, lv.height) != (ew, eh):
            raise CorruptPyramid(
                f"level factor {lv.factor} has size {lv.width}x{lv.height}, expected {ew}x{eh}"
            )
        if lv.width < 1 or lv.height < 1:
            raise CorruptPyramid("empty level")


def open_slide(path) -> SlidePyramid:
    """Open a tile-tree directory or tiled TIFF; pixel data is read lazily."""
    path = Path(path)
    if not path.exists():
        raise UnsupportedFormat(f"{path} does not exist")
    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.is_file():
            raise UnsupportedFormat(f"{path} has no manifest.json")
        try:
            meta = json.loads(manifest.read_text())
            levels = [
                Level(as_fraction(lv["factor"]), int(lv["width"]), int(lv["height"]))
                for lv in meta["levels"]
            ]
            base_mag = as_fraction(meta["base_magnification"])
            tile = int(meta.get("tile_size", PATCH))
        except (KeyError, ValueError, TypeError, ZeroDivisionError) as exc:
            raise CorruptPyramid(f"bad manifest: {exc}") from exc
        _validate_levels(levels)
        source = _TileTreeSource(path, levels, tile)
        source.check()
        return SlidePyramid(levels, base_mag, source, name=path.name)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        try:
            with tifffile.TiffFile(path) as tf:
                levels, base_mag = [], None
                for page in tf.pages:
                    meta = json.loads(page.description or "{}")
                    if "factor" not in meta:
                        raise CorruptPyramid("TIFF page lacks a factor tag")
                    if base_mag is None:
                        base_mag = as_fraction(meta.get("base_magnification", 20))
                    levels.append(Level(as_fraction(meta["factor"]), int(page.imagewidth), int(page.imagelength)))
        except (json.JSONDecodeError, tifffile.TiffFileError) as exc:
            raise CorruptPyramid(str(exc)) from exc
        _validate_levels(levels)
        return SlidePyramid(levels, base_mag, _TiffSource(path, levels), name=path.stem)
    raise UnsupportedFormat(f"unsupported slide container: {path}")


def level_sizes(width: int, height: int, factors) -> list[Level]:
    return [Level(as_fraction(f), int(width * as_fraction(f)), int(height * as_fraction(f))) for f in factors]


def _level_reader(base: np.ndarray, factor: Fraction) -> Callable[[int, int, int, int], np.ndarray]:
    h, w = base.shape[:2]

    def read(y0, y1, x0, x1):
        if factor == 1:
            return base[y0:y1, x0:x1]

        def src(ya, yb, xa, xb):
            return base[ya:yb, xa:xb]

        return box_resample_region(src, (h, w), factor, y0, y1, x0, x1)

    return read


def write_tile_tree(path, base: np.ndarray, factors=(1, Fraction(1, 5)), base_magnification=20) -> Path:
    """Write ``base`` (H, W, 3 uint8) and its box-downsampled levels as a tile tree."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = base.shape[:2]
    levels = level_sizes(w, h, factors)
    _validate_levels(levels)
    for k, lv in enumerate(levels):
        read = _level_reader(base, lv.factor)
        for i in range(math.ceil(lv.height / PATCH)):
            for j in range(math.ceil(lv.width / PATCH)):
                y0, x0 = i * PATCH, j * PATCH
                tile = read(y0, min(lv.height, y0 + PATCH), x0, min(lv.width, x0 + PATCH))
                write_png(path / f"level_{k}" / f"{i}_{j}.png", tile)
    manifest = {
        "base_magnification": _num(as_fraction(base_magnification)),
        "tile_size": PATCH,
        "levels": [{"factor": str(lv.factor), "width": lv.width, "height": lv.height} for lv in levels],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def write_tiff(path, base: np.ndarray, factors=(1, Fraction(1, 5)), base_magnification=20) -> Path:
    import tifffile

    path = Path(path)
    h, w = base.shape[:2]
    levels = level_sizes(w, h, factors)
    _validate_levels(levels)
    with tifffile.TiffWriter(path) as tw:
        for lv in levels:
            arr = _level_reader(base, lv.factor)(0, lv.height, 0, lv.width)
            desc = json.dumps({"factor": str(lv.factor), "base_magnification": _num(as_fraction(base_magnification))})
            tw.write(arr, tile=(PATCH, PATCH), photometric="rgb", description=desc, metadata=None)
    return path


def _num(f: Fraction):
    return f.numerator if f.denominator == 1 else str(f)
