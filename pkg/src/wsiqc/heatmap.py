"""Per-patch score heatmaps over a grayscale slide thumbnail."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .imaging import to_gray

CELL = 32  # thumbnail pixels per patch
ALPHA = 0.5


@dataclass
class Heatmap:
    normalized: dict  # (i, j) -> [0, 1]
    colors: dict  # (i, j) -> (r, g, b) uint8 overlay colour
    image: np.ndarray  # (rows*CELL, cols*CELL, 3) uint8


def normalize_scores(scores: dict) -> dict:
    """Min-max normalisation to [0, 1]; identical scores all map to 0.5."""
    if not scores:
        raise ValueError("no patch scores")
    vals = np.array(list(scores.values()), dtype=np.float64)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return {k: 0.5 for k in scores}
    return {k: float((v - lo) / (hi - lo)) for k, v in scores.items()}


def _thumbnail(slide, rows: int, cols: int, mag) -> np.ndarray:
    """Grayscale slide image sized so each patch at ``mag`` spans CELL pixels."""
    if slide is None:
        return np.full((rows * CELL, cols * CELL), 255, dtype=np.uint8)
    k = len(slide.levels) - 1
    lv = slide.levels[k]
    img = slide.read_region(k, 0, lv.height, 0, lv.width)
    grid = slide.grid(mag)
    # the patch grid covers ceil(size / 512) patches; pad the level image to match
    scale = float(grid.width) / lv.width
    full_h, full_w = int(round(rows * 512 / scale)), int(round(cols * 512 / scale))
    pad = np.full((max(full_h, lv.height), max(full_w, lv.width), 3), 255, dtype=np.uint8)
    pad[: lv.height, : lv.width] = img
    gray = Image.fromarray(to_gray(pad[:full_h, :full_w]))
    return np.asarray(gray.resize((cols * CELL, rows * CELL), Image.BILINEAR))


def render_heatmap(scores: dict, rows: int, cols: int, slide=None, mag=20, cmap: str = "RdYlGn") -> Heatmap:
    """``scores`` maps (i, j) to a value; patches without a score stay gray."""
    norm = normalize_scores(scores)
    cm = colormaps[cmap]
    colors = {k: tuple(int(round(255 * c)) for c in cm(v)[:3]) for k, v in norm.items()}
    gray = _thumbnail(slide, rows, cols, mag).astype(np.float64)
    out = np.repeat(gray[..., None], 3, axis=2)
    for (i, j), c in colors.items():
        ys, xs = slice(i * CELL, (i + 1) * CELL), slice(j * CELL, (j + 1) * CELL)
        out[ys, xs] = (1 - ALPHA) * out[ys, xs] + ALPHA * np.asarray(c, dtype=np.float64)
    return Heatmap(norm, colors, np.clip(np.round(out), 0, 255).astype(np.uint8))


def emit_heatmap(scores: dict, metric: str, out_path, rows: int | None = None, cols: int | None = None,
                 slide=None, mag=20) -> Heatmap:
    """Write a PNG heatmap of per-patch ``scores`` for ``metric``.

    Keys may be (i, j) tuples or ``"i,j"`` strings as stored in reports.
    """
    parsed = {}
    for k, v in scores.items():
        if isinstance(k, str):
            i, j = (int(t) for t in k.split(","))
        else:
            i, j = k
        parsed[(i, j)] = float(v)
    if rows is None or cols is None:
        if slide is not None:
            g = slide.grid(mag)
            rows, cols = g.rows, g.cols
        else:
            rows = max(i for i, _ in parsed) + 1
            cols = max(j for _, j in parsed) + 1
    hm = render_heatmap(parsed, rows, cols, slide, mag)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(hm.image).save(out_path)
    return hm


def emit_report_heatmaps(report, out_dir, slide=None) -> list:
    """One PNG per metric that carries per-patch scores in ``report``."""
    from fractions import Fraction

    written = []
    for metric, entry in sorted(report.diagnostics.get("patch_scores", {}).items()):
        if not entry["scores"]:
            continue
        mag = Fraction(entry["magnification"])
        path = Path(out_dir) / f"{report.slide_id}_{metric}.png"
        emit_heatmap(entry["scores"], metric, path, slide=slide, mag=mag)
        written.append(path)
    return written
