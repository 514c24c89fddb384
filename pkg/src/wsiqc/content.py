"""Cell count (q6), cell mass (q7) and neutrophil coverage (q8) from detections."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ZeroContentArea
from .imaging import PATCH, to_gray

CLASSES = ("squamous_cell", "cell_mass", "neutrophil")
CONFIDENCE_FLOOR = 0.5
EDGE_BAND = 16
ABUT_TOLERANCE = 2
MIN_CELLS = 5000
MAX_MASSES = 50


@dataclass(frozen=True)
class Detection:
    level: str
    i: int
    j: int
    cls: str
    x: float
    y: float
    w: float
    h: float
    conf: float

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown detection class {self.cls!r}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError("bbox must have positive size")
        if self.x < 0 or self.y < 0 or self.x + self.w > PATCH or self.y + self.h > PATCH:
            raise ValueError("bbox outside patch bounds")
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError("confidence outside [0, 1]")
        if self.i < 0 or self.j < 0:
            raise ValueError("negative patch index")

    @property
    def patch(self) -> tuple[str, int, int]:
        return (self.level, self.i, self.j)

    def global_box(self) -> tuple[float, float, float, float]:
        x0 = self.j * PATCH + self.x
        y0 = self.i * PATCH + self.y
        return x0, y0, x0 + self.w, y0 + self.h

    def sort_key(self):
        return (self.level, self.i, self.j, self.x, self.y, self.w, self.h, self.cls, self.conf)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "i": self.i,
            "j": self.j,
            "class": self.cls,
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
            "conf": self.conf,
        }


@dataclass
class ContentMeasurement:
    cell_count: int
    mass_count: int
    s_total: float
    s_neutrophil: float
    q6: float
    q7: float
    q8: float | None
    tbs_annotation: str


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _interval_iou(a0, a1, b0, b1) -> float:
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def _match_across(a: Detection, b: Detection, axis: str) -> bool:
    """Do ``a`` and ``b`` (b right of / below a) describe one object cut by the seam?"""
    ga, gb = a.global_box(), b.global_box()
    if axis == "x":
        seam = b.j * PATCH
        ca, cb = (ga[0] + ga[2]) / 2, (gb[0] + gb[2]) / 2
        near = seam - ca < EDGE_BAND or cb - seam < EDGE_BAND
        abut = ga[2] >= seam - ABUT_TOLERANCE and gb[0] <= seam + ABUT_TOLERANCE
        along = _interval_iou(ga[1], ga[3], gb[1], gb[3])
    else:
        seam = b.i * PATCH
        ca, cb = (ga[1] + ga[3]) / 2, (gb[1] + gb[3]) / 2
        near = seam - ca < EDGE_BAND or cb - seam < EDGE_BAND
        abut = ga[3] >= seam - ABUT_TOLERANCE and gb[1] <= seam + ABUT_TOLERANCE
        along = _interval_iou(ga[0], ga[2], gb[0], gb[2])
    if not near:
        return False
    return (abut and along >= 0.5) or _iou(ga, gb) >= 0.5


def deduplicate(detections: Iterable[Detection]) -> list[Detection]:
    """Merge detections of one object split across neighbouring patches.

    Patches are analysed independently, so an object on a seam can be reported
    once per patch as clipped boxes that touch the seam from both sides. Two
    such boxes match when at least one centre lies within 16 px of the shared
    edge and either their extents along the edge overlap with IoU >= 0.5 or the
    boxes themselves overlap with IoU >= 0.5 in slide coordinates. Matched
    groups (found with union-find, so corners chain correctly) keep only their
    largest member. Input order does not affect the result.
    """
    dets = sorted(detections, key=Detection.sort_key)
    parent = list(range(len(dets)))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    by_patch: dict[tuple, list[int]] = {}
    for k, d in enumerate(dets):
        by_patch.setdefault((d.level, d.cls, d.i, d.j), []).append(k)
    for (level, cls, i, j), members in by_patch.items():
        for di, dj, axis in ((0, 1, "x"), (1, 0, "y")):
            others = by_patch.get((level, cls, i + di, j + dj))
            if not others:
                continue
            for a in members:
                da = dets[a]
                if axis == "x" and da.x + da.w < PATCH - EDGE_BAND * 2 - ABUT_TOLERANCE:
                    continue
                if axis == "y" and da.y + da.h < PATCH - EDGE_BAND * 2 - ABUT_TOLERANCE:
                    continue
                for b in others:
                    if _match_across(da, dets[b], axis):
                        union(a, b)
    groups: dict[int, list[int]] = {}
    for k in range(len(dets)):
        groups.setdefault(find(k), []).append(k)
    kept = []
    for members in groups.values():
        best = max(members, key=lambda k: (dets[k].w * dets[k].h, -k))
        kept.append(dets[best])
    return sorted(kept, key=Detection.sort_key)


def _count(detections, cls: str, confidence_floor: float) -> int:
    dets = [d for d in detections if d.cls == cls and d.conf >= confidence_floor]
    return len(deduplicate(dets))


def count_cells(detections: Iterable[Detection], confidence_floor: float = CONFIDENCE_FLOOR) -> int:
    return _count(detections, "squamous_cell", confidence_floor)


def count_masses(detections: Iterable[Detection], confidence_floor: float = CONFIDENCE_FLOOR) -> int:
    return _count(detections, "cell_mass", confidence_floor)


def q6_from_count(x: int) -> float:
    if x < 0:
        raise ValueError("negative cell count")
    return x / MIN_CELLS if x < MIN_CELLS else 1.0


def q7_from_mass_count(count: int) -> float:
    if count < 0:
        raise ValueError("negative mass count")
    return 1.0 if count <= MAX_MASSES else MAX_MASSES / count


def otsu_threshold(gray: np.ndarray) -> int | None:
    """Otsu threshold t on 8-bit values (class 0 is ``gray <= t``).

    Returns None for single-valued input. Among equally good thresholds the
    lowest is returned.
    """
    g = np.asarray(gray).astype(np.int64).ravel()
    if g.size == 0 or g.min() == g.max():
        return None
    hist = np.bincount(g, minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    w1 = total - w0
    mt = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(256, -1.0)
    # between-class variance times total^2, kept in exact-ish float form
    between[valid] = (mt * w0[valid] - m0[valid] * total) ** 2 / (w0[valid] * w1[valid])
    return int(np.argmax(between))


def box_area(pixels: np.ndarray, det_or_box) -> int:
    """Dark-side Otsu foreground pixel count inside a bounding box."""
    if isinstance(det_or_box, Detection):
        x, y, w, h = det_or_box.x, det_or_box.y, det_or_box.w, det_or_box.h
    else:
        x, y, w, h = det_or_box
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = int(np.ceil(x + w)), int(np.ceil(y + h))
    gray = to_gray(np.asarray(pixels)[y0:y1, x0:x1])
    t = otsu_threshold(gray)
    if t is None:
        return 0
    return int(np.count_nonzero(gray <= t))


def tbs_annotation(coverage: float) -> str:
    if coverage > 0.75:
        return "unsatisfactory"
    if coverage >= 0.5:
        return "inflammatory_obscuration"
    return "none"


def q8_from_areas(s_neutrophil: float, s_total: float) -> tuple[float, str]:
    if s_total <= 0:
        raise ZeroContentArea("no content area")
    if s_neutrophil < 0:
        raise ValueError("negative neutrophil area")
    coverage = s_neutrophil / s_total
    return min(1.0, max(0.0, 1.0 - coverage)), tbs_annotation(coverage)


def measure_content(
    detections: Sequence[Detection],
    neutrophil_areas: Sequence[int],
    n_content_patches: int,
    confidence_floor: float = CONFIDENCE_FLOOR,
) -> ContentMeasurement:
    """Assemble q6-q8 once per-box neutrophil areas have been measured."""
    x = count_cells(detections, confidence_floor)
    masses = count_masses(detections, confidence_floor)
    s_total = float(PATCH * PATCH * n_content_patches)
    s_n = float(sum(neutrophil_areas))
    if s_total > 0:
        q8, annotation = q8_from_areas(s_n, s_total)
    else:
        q8, annotation = None, "none"
    return ContentMeasurement(
        cell_count=x,
        mass_count=masses,
        s_total=s_total,
        s_neutrophil=s_n,
        q6=q6_from_count(x),
        q7=q7_from_mass_count(masses),
        q8=q8,
        tbs_annotation=annotation,
    )
