"""Inference-artifact sources.

Segmentation and detection networks run out of process; their outputs reach
the pipeline through an artifact directory::

    detections.jsonl                  one {level,i,j,class,x,y,w,h,conf} per line
    masks/<level>_<i>_<j>_<class>.png 1-bit 512x512 masks (class marker|bubble)
    meta.json                         optional {producer, version}

``level`` is the patch-grid label of the magnification the artifact refers to
(``x4``, ``x20``, ``x5-2`` for 2.5x).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import MASK_CLASSES, SegMask
from .content import CLASSES as DETECTION_CLASSES
from .content import Detection
from .errors import InputError, MalformedDetectionLine, MaskSizeMismatch, UnknownClass
from .imaging import parse_mag_label, read_png, write_png

_MASK_NAME = re.compile(r"^(x\d+(?:-\d+)?)_(\d+)_(\d+)_([a-z_]+)\.png$")


@dataclass
class BackendArtifactSet:
    masks: list = field(default_factory=list)
    detections: list = field(default_factory=list)
    provenance: str = "files"
    meta: dict = field(default_factory=dict)

    def masks_for(self, level: str) -> list:
        return [m for m in self.masks if m.level == level]

    def detections_for(self, level: str) -> list:
        return [d for d in self.detections if d.level == level]

    def validate_against(self, slide) -> None:
        """Every referenced patch must exist in ``slide``'s grid at that level."""
        grids = {}
        for item in list(self.masks) + list(self.detections):
            if item.level not in grids:
                grids[item.level] = slide.grid(parse_mag_label(item.level))
            g = grids[item.level]
            if not (0 <= item.i < g.rows and 0 <= item.j < g.cols):
                raise InputError(f"artifact references patch {item.level} ({item.i},{item.j}) outside the slide")


def _parse_detection(lineno: int, line: str) -> Detection:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedDetectionLine(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise MalformedDetectionLine(lineno, "expected an object")
    missing = [k for k in ("level", "i", "j", "class", "x", "y", "w", "h", "conf") if k not in d]
    if missing:
        raise MalformedDetectionLine(lineno, f"missing fields {missing}")
    if d["class"] not in DETECTION_CLASSES:
        raise UnknownClass(f"line {lineno}: unknown detection class {d['class']!r}")
    try:
        parse_mag_label(str(d["level"]))
        nums = [float(d[k]) for k in ("x", "y", "w", "h", "conf")]
        if not all(math.isfinite(v) for v in nums):
            raise ValueError("non-finite number")
        if int(d["i"]) != d["i"] or int(d["j"]) != d["j"]:
            raise ValueError("patch indices must be integers")
        return Detection(str(d["level"]), int(d["i"]), int(d["j"]), d["class"], *nums)
    except (ValueError, TypeError) as exc:
        raise MalformedDetectionLine(lineno, str(exc)) from None


def load_file_backend(directory) -> BackendArtifactSet:
    """Parse and validate an artifact directory. An empty directory is an empty set."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    detections = []
    det_file = directory / "detections.jsonl"
    if det_file.is_file():
        for lineno, line in enumerate(det_file.read_text().splitlines(), start=1):
            if line.strip():
                detections.append(_parse_detection(lineno, line))
    masks = []
    mask_files = sorted(directory.glob("*.png")) + sorted((directory / "masks").glob("*.png"))
    for path in mask_files:
        m = _MASK_NAME.match(path.name)
        if not m:
            raise InputError(f"mask file name {path.name!r} does not follow <level>_<i>_<j>_<class>.png")
        level, i, j, cls = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
        if cls not in MASK_CLASSES:
            raise UnknownClass(f"{path.name}: unknown mask class {cls!r}")
        bits = read_png(path)
        if bits.ndim == 3:
            bits = bits.max(axis=2) > 0
        if bits.shape != (512, 512):
            raise MaskSizeMismatch(f"{path.name}: mask is {bits.shape[1]}x{bits.shape[0]}, expected 512x512")
        masks.append(SegMask(level, i, j, cls, bits.astype(bool)))
    meta = {}
    if (directory / "meta.json").is_file():
        meta = json.loads((directory / "meta.json").read_text())
    return BackendArtifactSet(masks, detections, "files", meta)


def write_file_backend(artifacts: BackendArtifactSet, directory) -> Path:
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(d.to_dict(), sort_keys=True) for d in sorted(artifacts.detections, key=Detection.sort_key)]
    (directory / "detections.jsonl").write_text("".join(line + "\n" for line in lines))
    for m in artifacts.masks:
        write_png(directory / "masks" / f"{m.level}_{m.i}_{m.j}_{m.cls}.png", np.asarray(m.bits, dtype=bool))
    if artifacts.meta:
        (directory / "meta.json").write_text(json.dumps(artifacts.meta, indent=2, sort_keys=True))
    return directory


def empty_backend() -> BackendArtifactSet:
    return BackendArtifactSet(provenance="files")
