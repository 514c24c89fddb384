"""Grid-like stitching artifact metric (q1).

Background patches should be statistically flat; periodic stitch seams raise
the gray-level variance of content-free patches above the variance measured
on seam-free reference backgrounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateCalibration, InsufficientBackground, TooFewSamples
from .imaging import to_gray

N_BACKGROUND = 5
MIN_CALIBRATION_PATCHES = 30


@dataclass(frozen=True)
class GridCalibration:
    v_nogrid: float
    percentile95: float
    sample_count: int
    threshold_source: str = "percentile95"

    def __post_init__(self):
        if not self.v_nogrid > 0:
            raise DegenerateCalibration("reference variance must be positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def to_json(self) -> str:
        return json.dumps(
            {
                "v_nogrid": self.v_nogrid,
                "percentile95": self.percentile95,
                "sample_count": self.sample_count,
                "threshold_source": self.threshold_source,
                "grayscale": "bt601",
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GridCalibration":
        d = json.loads(text)
        if d.get("grayscale", "bt601") != "bt601":
            raise ValueError("only bt601 grayscale calibrations are supported")
        return cls(
            v_nogrid=float(d["v_nogrid"]),
            percentile95=float(d["percentile95"]),
            sample_count=int(d["sample_count"]),
            threshold_source=d.get("threshold_source", "percentile95"),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GridCalibration":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class BackgroundStats:
    """Per-patch summary kept for every white patch during the tiling pass."""

    i: int
    j: int
    white_fraction: float
    padded: bool
    mean: float
    variance: float


@dataclass(frozen=True)
class GridMeasurement:
    patches: tuple[tuple[int, int], ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]
    v_wsi: float
    deviation: float
    q1: float


def patch_mean_var(gray: np.ndarray) -> tuple[float, float]:
    """Population mean and variance of all pixel values."""
    g = np.asarray(gray, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty patch")
    mean = float(g.mean())
    var = float(np.mean((g - mean) ** 2))
    return mean, var


def background_stats(patch) -> BackgroundStats:
    """Gray statistics of a PatchRecord over its non-padding area."""
    mean, var = patch_mean_var(to_gray(patch.valid_pixels))
    return BackgroundStats(patch.i, patch.j, patch.white_fraction, patch.padded, mean, var)


def select_content_free_patches(candidates: Iterable, rows: int, cols: int) -> list:
    """Pick the five whitest background patches, spread over the slide.

    Five anchors (four corners, then the centre) each claim the remaining
    candidate with the highest white fraction, ties going to the candidate
    nearest that anchor, then to the lowest (i, j). Unpadded candidates are
    preferred whenever at least five exist. The result does not depend on the
    order candidates are supplied in.
    """
    cands = list(candidates)
    unpadded = [c for c in cands if not c.padded]
    if len(unpadded) >= N_BACKGROUND:
        cands = unpadded
    if len(cands) < N_BACKGROUND:
        raise InsufficientBackground(f"{len(cands)} white patches, need {N_BACKGROUND}")
    anchors = [
        (0.0, 0.0),
        (0.0, cols - 1.0),
        (rows - 1.0, 0.0),
        (rows - 1.0, cols - 1.0),
        ((rows - 1) / 2.0, (cols - 1) / 2.0),
    ]
    chosen, taken = [], set()
    for ai, aj in anchors:
        best = None
        for c in cands:
            if (c.i, c.j) in taken:
                continue
            key = (-c.white_fraction, (c.i - ai) ** 2 + (c.j - aj) ** 2, c.i, c.j)
            if best is None or key < best[0]:
                best = (key, c)
        chosen.append(best[1])
        taken.add((best[1].i, best[1].j))
    return chosen


def compute_q1(stats: Sequence[BackgroundStats], cal: GridCalibration) -> GridMeasurement:
    if len(stats) != N_BACKGROUND:
        raise ValueError(f"expected {N_BACKGROUND} background patches, got {len(stats)}")
    variances = tuple(float(s.variance) for s in stats)
    v_wsi = sum(variances) / N_BACKGROUND
    deviation = abs(v_wsi - cal.v_nogrid) / cal.v_nogrid
    q1 = min(1.0, max(0.0, 1.0 - deviation))
    return GridMeasurement(
        patches=tuple((s.i, s.j) for s in stats),
        means=tuple(float(s.mean) for s in stats),
        variances=variances,
        v_wsi=v_wsi,
        deviation=deviation,
        q1=q1,
    )


def q1_from_slide(slide, cal: GridCalibration, mag=4) -> GridMeasurement:
    """Convenience wrapper: tile ``slide`` at ``mag`` and score its background."""
    from .pyramid import iter_patches

    grid = slide.grid(mag)
    stats = [background_stats(p) for p in iter_patches(slide, mag) if p.is_white]
    return compute_q1(select_content_free_patches(stats, grid.rows, grid.cols), cal)


def calibrate_grid(reference_patches: Iterable[np.ndarray]) -> GridCalibration:
    """Reference no-grid variance from content-free patches (RGB or gray)."""
    variances = []
    for p in reference_patches:
        p = np.asarray(p)
        gray = to_gray(p) if p.ndim == 3 else p
        variances.append(patch_mean_var(gray)[1])
    if len(variances) < MIN_CALIBRATION_PATCHES:
        raise TooFewSamples(f"{len(variances)} reference patches, need {MIN_CALIBRATION_PATCHES}")
    v = np.asarray(variances)
    v_nogrid = float(v.mean())
    if not v_nogrid > 0:
        raise DegenerateCalibration("reference patches have zero variance")
    return GridCalibration(
        v_nogrid=v_nogrid,
        percentile95=float(np.percentile(v, 95)),
        sample_count=len(variances),
    )
