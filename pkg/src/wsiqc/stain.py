"""Hematoxylin/eosin separation by colour deconvolution and the staining score (q5)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TooFewSamples
from .imaging import to_gray

DEFAULT_H = (0.650, 0.704, 0.286)
DEFAULT_E = (0.072, 0.990, 0.105)
DEFAULT_TAU = 0.15
DEFAULT_RANGES = {"hematoxylin": (180.0, 200.0), "eosin": (185.0, 190.0)}
CHANNELS = ("hematoxylin", "eosin")
MIN_REFERENCE_SLIDES = 20
MIN_BASIS_PIXELS = 1000
OD_FLOOR = 0.15


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero stain vector")
    # already-unit vectors pass through so serialised bases reload exactly
    return v if abs(n - 1.0) < 1e-12 else v / n


@dataclass(frozen=True)
class StainBasis:
    h: tuple[float, float, float] = DEFAULT_H
    e: tuple[float, float, float] = DEFAULT_E
    background: tuple[float, float, float] = (255.0, 255.0, 255.0)
    adaptive_failed: bool = False

    def __post_init__(self):
        h, e = _unit(self.h), _unit(self.e)
        if np.any(h < 0) or np.any(e < 0):
            raise ValueError("stain OD vectors must be non-negative")
        if np.linalg.matrix_rank(np.stack([h, e]), tol=1e-6) < 2:
            raise ValueError("stain vectors are linearly dependent")
        object.__setattr__(self, "h", tuple(float(x) for x in h))
        object.__setattr__(self, "e", tuple(float(x) for x in e))

    @property
    def matrix(self) -> np.ndarray:
        """3x2 matrix with the OD vectors as columns."""
        return np.stack([self.h, self.e], axis=1)

    def to_dict(self) -> dict:
        return {"h": list(self.h), "e": list(self.e)}


def optical_density(pixels, background=(255.0, 255.0, 255.0)) -> np.ndarray:
    i = np.maximum(np.asarray(pixels, dtype=np.float64), 1.0)
    return -np.log10(i / np.asarray(background, dtype=np.float64))


def deconvolve(pixels, basis: StainBasis = StainBasis()) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (hematoxylin, eosin) concentrations, negatives clamped to 0."""
    od = optical_density(pixels, basis.background)
    conc = od.reshape(-1, 3) @ np.linalg.pinv(basis.matrix).T
    np.maximum(conc, 0.0, out=conc)
    shape = od.shape[:-1]
    return conc[:, 0].reshape(shape), conc[:, 1].reshape(shape)


def synthesize(c_h, c_e, basis: StainBasis = StainBasis()) -> np.ndarray:
    """Beer-Lambert forward model: float RGB intensities for given concentrations."""
    c_h = np.asarray(c_h, dtype=np.float64)
    c_e = np.asarray(c_e, dtype=np.float64)
    od = c_h[..., None] * np.asarray(basis.h) + c_e[..., None] * np.asarray(basis.e)
    return np.asarray(basis.background) * 10.0 ** (-od)


def angle_deg(u, v) -> float:
    u, v = _unit(u), _unit(v)
    return math.degrees(math.acos(max(-1.0, min(1.0, float(np.dot(u, v))))))


def estimate_basis(pixels, alpha: float = 1.0, default: StainBasis = StainBasis()) -> StainBasis:
    """Adaptive stain vectors from the principal OD plane of stained pixels.

    ``pixels`` is any (..., 3) array (or list of arrays) of RGB values. Pixels
    with OD norm below 0.15 are ignored. The two stain directions are the
    ``alpha``/``100 - alpha`` percentile angles inside the plane. Degenerate
    inputs return ``default`` with ``adaptive_failed`` set.
    """
    if isinstance(pixels, (list, tuple)):
        pixels = np.concatenate([np.asarray(p).reshape(-1, 3) for p in pixels]) if pixels else np.empty((0, 3))
    od = optical_density(np.asarray(pixels).reshape(-1, 3), default.background)
    od = od[np.linalg.norm(od, axis=1) > OD_FLOOR]
    fallback = StainBasis(default.h, default.e, default.background, adaptive_failed=True)
    if od.shape[0] < MIN_BASIS_PIXELS:
        return fallback
    evals, evecs = np.linalg.eigh(np.cov(od.T))
    if evals[-1] <= 0 or evals[-2] / evals[-1] < 1e-4:
        return fallback
    plane = evecs[:, [2, 1]]
    mean_od = od.mean(axis=0)
    # orient the plane axes so the bulk of the data has positive coordinates
    for k in range(2):
        if plane[:, k] @ mean_od < 0:
            plane[:, k] = -plane[:, k]
    t = od @ plane
    phi = np.arctan2(t[:, 1], t[:, 0])
    lo, hi = np.percentile(phi, alpha), np.percentile(phi, 100 - alpha)
    v_lo = plane @ np.array([math.cos(lo), math.sin(lo)])
    v_hi = plane @ np.array([math.cos(hi), math.sin(hi)])
    if v_lo.sum() < 0:
        v_lo = -v_lo
    if v_hi.sum() < 0:
        v_hi = -v_hi
    if np.min(v_lo) < -0.05 or np.min(v_hi) < -0.05:
        return fallback
    v_lo, v_hi = np.clip(v_lo, 0, None), np.clip(v_hi, 0, None)
    if angle_deg(v_lo, v_hi) < 3.0:
        return fallback
    # hematoxylin absorbs more red than eosin
    h, e = (v_lo, v_hi) if _unit(v_lo)[0] > _unit(v_hi)[0] else (v_hi, v_lo)
    try:
        return StainBasis(tuple(h), tuple(e), default.background)
    except ValueError:
        return fallback


def channel_gray(pixels, conc, tau: float = DEFAULT_TAU, exclude=None) -> tuple[float | None, int]:
    """Mean BT.601 gray of the original pixels where ``conc > tau``."""
    s, n = channel_gray_sum(pixels, conc, tau, exclude)
    return (s / n if n else None), n


def channel_gray_sum(pixels, conc, tau: float = DEFAULT_TAU, exclude=None) -> tuple[int, int]:
    if tau <= 0:
        raise ValueError("tau must be positive")
    mask = np.asarray(conc) > tau
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)
    gray = to_gray(pixels)
    n = int(np.count_nonzero(mask))
    return (int(gray[mask].astype(np.int64).sum()) if gray.dtype.kind != "f" else float(gray[mask].sum())), n


def score_q5(v_gray: float, v_min: float, v_max: float) -> float:
    """1 inside the standard range, linear ramps to 0 at 2*v_max and at 0."""
    if not 0 < v_min <= v_max:
        raise ValueError("invalid staining range")
    if v_min <= v_gray <= v_max:
        return 1.0
    if v_gray > v_max:
        return max(0.0, 1.0 - (v_gray - v_max) / v_max)
    return max(0.0, 1.0 - (v_min - v_gray) / v_min)


@dataclass(frozen=True)
class StainCalibration:
    hematoxylin: tuple[float, float] = DEFAULT_RANGES["hematoxylin"]
    eosin: tuple[float, float] = DEFAULT_RANGES["eosin"]
    sample_count: int = 0
    basis: StainBasis = field(default_factory=StainBasis)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        for name in CHANNELS:
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 255:
                raise ValueError(f"invalid {name} range {lo}..{hi}")

    def range_for(self, channel: str) -> tuple[float, float]:
        return getattr(self, channel)

    def to_json(self) -> str:
        return json.dumps(
            {
                "hematoxylin": {"min": self.hematoxylin[0], "max": self.hematoxylin[1]},
                "eosin": {"min": self.eosin[0], "max": self.eosin[1]},
                "basis": self.basis.to_dict(),
                "tau": self.tau,
                "sample_count": self.sample_count,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "StainCalibration":
        d = json.loads(text)
        basis = d.get("basis") or {}
        return cls(
            hematoxylin=(float(d["hematoxylin"]["min"]), float(d["hematoxylin"]["max"])),
            eosin=(float(d["eosin"]["min"]), float(d["eosin"]["max"])),
            sample_count=int(d.get("sample_count", 0)),
            basis=StainBasis(tuple(basis.get("h", DEFAULT_H)), tuple(basis.get("e", DEFAULT_E))),
            tau=float(d.get("tau", DEFAULT_TAU)),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "StainCalibration":
        return cls.from_json(Path(path).read_text())


def calibrate_stain(measurements: Sequence[dict], tau: float = DEFAULT_TAU) -> StainCalibration:
    """Standard ranges mean +- 2 sd of per-slide gray levels.

    ``measurements`` holds one mapping per reference slide with keys
    ``hematoxylin`` and ``eosin`` (mean stained gray of that slide).
    """
    if len(measurements) < MIN_REFERENCE_SLIDES:
        raise TooFewSamples(f"{len(measurements)} reference slides, need {MIN_REFERENCE_SLIDES}")
    ranges = {}
    for ch in CHANNELS:
        v = np.asarray([m[ch] for m in measurements], dtype=np.float64)
        mu, sd = float(v.mean()), float(v.std(ddof=1))
        lo, hi = max(mu - 2 * sd, 1e-6), min(mu + 2 * sd, 255.0)
        ranges[ch] = (lo, hi)
    return StainCalibration(ranges["hematoxylin"], ranges["eosin"], sample_count=len(measurements), tau=tau)


@dataclass
class StainMeasurement:
    v_gray: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    q5: float | None = None
    basis: StainBasis | None = None

    @property
    def evaluable(self) -> bool:
        return self.q5 is not None


class StainAccumulator:
    """Pixel-count-weighted slide gray levels, fed patch by patch in index order."""

    def __init__(self):
        self.sums = {ch: 0 for ch in CHANNELS}
        self.counts = {ch: 0 for ch in CHANNELS}

    def add(self, sums: dict, counts: dict) -> None:
        for ch in CHANNELS:
            self.sums[ch] += sums[ch]
            self.counts[ch] += counts[ch]

    def finish(self, cal: StainCalibration, basis: StainBasis | None = None) -> StainMeasurement:
        m = StainMeasurement(basis=basis)
        for ch in CHANNELS:
            n = self.counts[ch]
            m.counts[ch] = n
            if n:
                m.v_gray[ch] = self.sums[ch] / n
                m.scores[ch] = score_q5(m.v_gray[ch], *cal.range_for(ch))
            else:
                m.v_gray[ch] = None
        if m.scores:
            m.q5 = min(m.scores.values())
        return m


def patch_stain_sums(pixels, basis: StainBasis, tau: float, exclude=None) -> tuple[dict, dict]:
    ch, ce = deconvolve(pixels, basis)
    sums, counts = {}, {}
    for name, conc in zip(CHANNELS, (ch, ce)):
        sums[name], counts[name] = channel_gray_sum(pixels, conc, tau, exclude)
    return sums, counts


def measure_stain(patches: Iterable[np.ndarray], cal: StainCalibration = StainCalibration(), basis: StainBasis | None = None) -> StainMeasurement:
    """Slide-level staining measurement over content patch pixel arrays."""
    patches = [np.asarray(p) for p in patches]
    if basis is None:
        basis = estimate_basis(patches, default=cal.basis)
    acc = StainAccumulator()
    for p in patches:
        acc.add(*patch_stain_sums(p, basis, cal.tau))
    return acc.finish(cal, basis)
