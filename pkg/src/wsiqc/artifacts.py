"""Marker (q3) and air/gel bubble (q4) occlusion from binary segmentation masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import MaskSizeMismatch, NotEvaluable, UnknownClass
from .imaging import PATCH

MASK_CLASSES = ("marker", "bubble")


@dataclass(frozen=True)
class SegMask:
    level: str
    i: int
    j: int
    cls: str
    bits: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.cls not in MASK_CLASSES:
            raise UnknownClass(f"unknown mask class {self.cls!r}")
        bits = np.asarray(self.bits)
        if bits.shape != (PATCH, PATCH):
            raise MaskSizeMismatch(f"mask {self.key} has shape {bits.shape}, expected {(PATCH, PATCH)}")
        object.__setattr__(self, "bits", bits.astype(bool, copy=False))

    @property
    def key(self) -> tuple[str, int, int, str]:
        return (self.level, self.i, self.j, self.cls)

    @property
    def patch(self) -> tuple[str, int, int]:
        return (self.level, self.i, self.j)


@dataclass
class OcclusionScore:
    cls: str
    ratios: dict
    n_detected: int
    n_content: int
    quality: float | None
    detected_only_quality: float | None

    @property
    def evaluable(self) -> bool:
        return self.quality is not None


def patch_occlusion(mask: SegMask) -> float:
    """Occluded fraction of the patch area."""
    return int(np.count_nonzero(mask.bits)) / float(PATCH * PATCH)


def aggregate_occlusion(ratios: Sequence[float], total_content_patches: int) -> float:
    """1 - mean occlusion over all content patches (undetected patches count as 0)."""
    n = len(ratios)
    if total_content_patches <= 0:
        raise NotEvaluable("no content patches")
    if n > total_content_patches:
        raise ValueError("more detected patches than content patches")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ValueError("occlusion ratios must lie in [0, 1]")
    mean = sum(ratios) / total_content_patches
    return min(1.0, max(0.0, 1.0 - mean))


def score_occlusion(masks: Iterable[SegMask], cls: str, content_patches: Iterable[tuple]) -> OcclusionScore:
    """Slide-level occlusion quality for one mask class.

    Masks on patches outside ``content_patches`` are ignored. The reduction
    runs in sorted patch order so the float result is reproducible.
    """
    if cls not in MASK_CLASSES:
        raise UnknownClass(cls)
    content = set(content_patches)
    ratios: dict[tuple, float] = {}
    for m in masks:
        if m.cls != cls or m.patch not in content:
            continue
        # several masks for one patch are merged by union
        prev = ratios.get(m.patch)
        if prev is None:
            ratios[m.patch] = m
        else:
            ratios[m.patch] = SegMask(m.level, m.i, m.j, cls, prev.bits | m.bits)
    ordered = {k: patch_occlusion(ratios[k]) for k in sorted(ratios)}
    values = [v for v in ordered.values() if v > 0]
    m_total = len(content)
    quality = aggregate_occlusion(list(ordered.values()), m_total) if m_total else None
    detected_only = 1.0 - sum(values) / len(values) if values else (1.0 if m_total else None)
    return OcclusionScore(cls, ordered, len(values), m_total, quality, detected_only)
