"""Synthetic cytology slides with exact ground truth.

Scenes are rendered in stain-concentration space and converted to RGB with
the Beer-Lambert model, so the stain module can be checked in a closed loop.
Alongside the tile-tree slide the generator returns the artifacts an ideal
segmentation/detection backend would produce (the "oracle") and the metric
values implied by the scene geometry.

Rendering order per base tile: concentration maps (cells, cell masses,
neutrophils, background wash, marker ink, bubble rims) -> optional Gaussian
defocus inside blur regions -> optical density -> intensity over a uniform
illuminant -> seam darkening of the stitching grid -> luminance noise
(identical in R, G, B) -> rounding to 8 bits.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .artifacts import SegMask, aggregate_occlusion
from .backends import BackendArtifactSet, write_file_backend
from .content import Detection, q6_from_count, q7_from_mass_count, q8_from_areas
from .errors import SpecOutOfBounds
from .imaging import PATCH, as_fraction, mag_label
from .metrics import METRIC_NAMES, MetricValue, MetricVector
from .pyramid import open_slide, write_tile_tree
from .stain import DEFAULT_TAU, StainBasis, StainCalibration, score_q5

INK = (0.80, 0.55, 0.20)
NEUTRAL = (1.0, 1.0, 1.0)
BUBBLE_RIM = 3.0
BUBBLE_OD = 0.4
OBJECT_GAP = 6
FRAGMENT_MAX = 24
NEUTROPHIL_BOX_MARGIN = 2


@dataclass
class MarkerStroke:
    x0: float
    y0: float
    x1: float
    y1: float
    radius: float

    @property
    def area(self) -> float:
        return 2 * self.radius * math.hypot(self.x1 - self.x0, self.y1 - self.y0) + math.pi * self.radius**2

    @property
    def bbox(self):
        r = self.radius
        return (min(self.x0, self.x1) - r, min(self.y0, self.y1) - r, max(self.x0, self.x1) + r, max(self.y0, self.y1) + r)

    def contains(self, xx, yy):
        dx, dy = self.x1 - self.x0, self.y1 - self.y0
        ll = dx * dx + dy * dy
        if ll == 0:
            t = 0.0
        else:
            t = np.clip(((xx - self.x0) * dx + (yy - self.y0) * dy) / ll, 0.0, 1.0)
        px, py = self.x0 + t * dx, self.y0 + t * dy
        return (xx - px) ** 2 + (yy - py) ** 2 <= self.radius**2


@dataclass
class Bubble:
    cx: float
    cy: float
    r: float

    @property
    def area(self) -> float:
        return math.pi * self.r**2

    @property
    def bbox(self):
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)

    def contains(self, xx, yy):
        return (xx - self.cx) ** 2 + (yy - self.cy) ** 2 <= self.r**2


@dataclass
class BlurRegion:
    x: int
    y: int
    w: int
    h: int
    sigma: float


@dataclass
class GridArtifact:
    amplitude: int
    period: int
    width: int


@dataclass
class SyntheticSceneSpec:
    width: int = 1024
    height: int = 1024
    seed: int = 0
    base_magnification: int = 20
    level_factors: tuple = ("1", "1/5")
    artifact_magnification: float = 4
    background: int = 236
    noise_sigma: float = 3.0
    content: list = field(default_factory=list)  # [x, y, w, h] in base px
    wash: float = 0.12
    cells: int = 0
    cell_axes: tuple = (14.0, 22.0)
    cytoplasm: float = 0.24
    nucleus_radius: tuple = (4.0, 6.0)
    nucleus: float = 0.2
    masses: int = 0
    mass_members: tuple = (5, 8)
    neutrophils: int = 0
    neutrophil_radius: tuple = (7.0, 10.0)
    neutrophil_stain: float = 0.6
    markers: list = field(default_factory=list)
    marker_density: float = 0.8
    bubbles: list = field(default_factory=list)
    blur: list = field(default_factory=list)
    grid: GridArtifact | None = None
    border_fragments: bool = True
    false_positives: int = 0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.markers = [m if isinstance(m, MarkerStroke) else MarkerStroke(**m) for m in self.markers]
        self.bubbles = [b if isinstance(b, Bubble) else Bubble(**b) for b in self.bubbles]
        self.blur = [b if isinstance(b, BlurRegion) else BlurRegion(**b) for b in self.blur]
        if isinstance(self.grid, dict):
            self.grid = GridArtifact(**self.grid)
        self.level_factors = tuple(str(f) for f in self.level_factors)
        self.content = [list(map(int, r)) for r in self.content]

    @property
    def artifact_factor(self) -> Fraction:
        return as_fraction(self.artifact_magnification) / as_fraction(self.base_magnification)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_factors"] = list(self.level_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        for key in ("cell_axes", "nucleus_radius", "mass_members", "neutrophil_radius", "level_factors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------- objects

@dataclass
class _Cell:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    rn: float
    c_cyto: float
    c_nuc: float

    def half_extent(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2), math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)

    def bbox(self):
        hx, hy = self.half_extent()
        return (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)


@dataclass
class _Mass:
    members: list

    def bbox(self):
        boxes = np.array([m.bbox() for m in self.members])
        return (boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())

    @property
    def cx(self):
        b = self.bbox()
        return (b[0] + b[2]) / 2

    @property
    def cy(self):
        b = self.bbox()
        return (b[1] + b[3]) / 2


@dataclass
class _Neutrophil:
    cx: float
    cy: float
    r: float
    c: float

    def bbox(self):
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)


class _Occupancy:
    """Axis-aligned boxes that must stay OBJECT_GAP apart in x or in y."""

    def __init__(self, cell: int = 64):
        self.cell = cell
        self.buckets: dict[tuple[int, int], list] = {}

    def _keys(self, box):
        c = self.cell
        for gx in range(int(box[0] - OBJECT_GAP) // c, int(box[2] + OBJECT_GAP) // c + 1):
            for gy in range(int(box[1] - OBJECT_GAP) // c, int(box[3] + OBJECT_GAP) // c + 1):
                yield gx, gy

    def free(self, box) -> bool:
        for k in self._keys(box):
            for o in self.buckets.get(k, ()):
                if not (box[0] >= o[2] + OBJECT_GAP or o[0] >= box[2] + OBJECT_GAP
                        or box[1] >= o[3] + OBJECT_GAP or o[1] >= box[3] + OBJECT_GAP):
                    return False
        return True

    def add(self, box) -> None:
        for k in self._keys(box):
            self.buckets.setdefault(k, []).append(box)


# ---------------------------------------------------------------- geometry

def _inside_rect(box, rect, margin=2.0) -> bool:
    x, y, w, h = rect
    return box[0] >= x + margin and box[1] >= y + margin and box[2] <= x + w - margin and box[3] <= y + h - margin


def _validate(spec: SyntheticSceneSpec) -> int:
    """Checks geometry; returns the artifact patch size in base pixels."""
    if spec.width < 1 or spec.height < 1:
        raise SpecOutOfBounds("slide must be non-empty")
    fa = spec.artifact_factor
    if not 0 < fa <= 1:
        raise SpecOutOfBounds("artifact magnification must not exceed the base magnification")
    cell = PATCH / fa
    if cell.denominator != 1:
        raise SpecOutOfBounds("artifact patch size must be a whole number of base pixels")
    cell = int(cell)
    for r in spec.content:
        x, y, w, h = r
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > spec.width or y + h > spec.height:
            raise SpecOutOfBounds(f"content rectangle {r} outside the slide")
        if x % cell or y % cell or w % cell or h % cell:
            raise SpecOutOfBounds(f"content rectangle {r} must align to the {cell}px artifact patch grid")
    for shape in list(spec.markers) + list(spec.bubbles):
        if not _box_in_content(shape.bbox, spec.content, cell):
            raise SpecOutOfBounds(f"{shape} must lie inside the content area")
    for group in (spec.markers, spec.bubbles):
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                if _boxes_overlap(group[a].bbox, group[b].bbox):
                    raise SpecOutOfBounds("shapes of one class must not overlap")
    for br in spec.blur:
        if br.x < 0 or br.y < 0 or br.x + br.w > spec.width or br.y + br.h > spec.height or br.sigma <= 0:
            raise SpecOutOfBounds(f"blur region {br} invalid")
    if spec.grid is not None:
        g = spec.grid
        if g.period <= g.width or g.width <= 0:
            raise SpecOutOfBounds("grid needs 0 < width < period")
        if (g.period * fa).denominator != 1 or (g.width * fa).denominator != 1 or cell % g.period:
            raise SpecOutOfBounds("grid period/width must be whole pixels at the artifact magnification and tile its patches")
    if spec.noise_sigma < 0:
        raise SpecOutOfBounds("noise_sigma must be >= 0")
    return cell


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _box_in_content(box, content, cell) -> bool:
    if box[0] < 0 or box[1] < 0:
        return False
    covered = set()
    for x, y, w, h in content:
        for i in range(y // cell, (y + h) // cell):
            for j in range(x // cell, (x + w) // cell):
                covered.add((i, j))
    for i in range(int(box[1]) // cell, int(math.ceil(box[3]) - 1) // cell + 1):
        for j in range(int(box[0]) // cell, int(math.ceil(box[2]) - 1) // cell + 1):
            if (i, j) not in covered:
                return False
    return True


def _content_patches(content, cell) -> set:
    out = set()
    for x, y, w, h in content:
        for i in range(y // cell, (y + h) // cell):
            for j in range(x // cell, (x + w) // cell):
                out.add((i, j))
    return out


# --------------------------------------------------------------- placement

def _random_point(rng, content, areas):
    k = rng.choice(len(content), p=areas)
    x, y, w, h = content[k]
    return content[k], x + rng.uniform(0, w), y + rng.uniform(0, h)


def _make_cell(rng, cx, cy, spec, scale=1.0):
    a = rng.uniform(*spec.cell_axes) * scale
    b = a * rng.uniform(0.6, 1.0)
    rn = min(rng.uniform(*spec.nucleus_radius), 0.5 * b)
    return _Cell(cx, cy, a, b, rng.uniform(0, math.pi), rn, spec.cytoplasm, spec.nucleus)


def _near_shape(box, shapes, margin) -> bool:
    grown = (box[0] - margin, box[1] - margin, box[2] + margin, box[3] + margin)
    return any(_boxes_overlap(grown, s.bbox) for s in shapes)


def _place(spec: SyntheticSceneSpec, rng):
    occ = _Occupancy()
    content = spec.content
    if not content:
        if spec.cells or spec.masses or spec.neutrophils:
            raise SpecOutOfBounds("objects requested but no content area")
        return [], [], []
    areas = np.array([w * h for _, _, w, h in content], dtype=float)
    areas /= areas.sum()
    masses, cells, neutros = [], [], []

    def attempts(n):
        return 400 * n + 1000

    tries = 0
    while len(masses) < spec.masses:
        tries += 1
        if tries > attempts(spec.masses):
            raise SpecOutOfBounds(f"could only place {len(masses)} of {spec.masses} cell masses")
        rect, cx, cy = _random_point(rng, content, areas)
        k = int(rng.integers(spec.mass_members[0], spec.mass_members[1] + 1))
        members = []
        spread = spec.cell_axes[0] * 0.9
        for _ in range(k):
            ang, rad = rng.uniform(0, 2 * math.pi), spread * math.sqrt(rng.uniform())
            members.append(_make_cell(rng, cx + rad * math.cos(ang), cy + rad * math.sin(ang), spec, 0.8))
        m = _Mass(members)
        box = m.bbox()
        if _inside_rect(box, rect) and occ.free(box):
            occ.add(box)
            masses.append(m)
    tries = 0
    while len(cells) < spec.cells:
        tries += 1
        if tries > attempts(spec.cells):
            raise SpecOutOfBounds(f"could only place {len(cells)} of {spec.cells} cells")
        rect, cx, cy = _random_point(rng, content, areas)
        c = _make_cell(rng, cx, cy, spec)
        box = c.bbox()
        if _inside_rect(box, rect) and occ.free(box):
            occ.add(box)
            cells.append(c)
    tries = 0
    shapes = list(spec.markers) + list(spec.bubbles)
    while len(neutros) < spec.neutrophils:
        tries += 1
        if tries > attempts(spec.neutrophils):
            raise SpecOutOfBounds(f"could only place {len(neutros)} of {spec.neutrophils} neutrophils")
        rect, cx, cy = _random_point(rng, content, areas)
        n = _Neutrophil(cx, cy, rng.uniform(*spec.neutrophil_radius), spec.neutrophil_stain)
        box = n.bbox()
        mb = NEUTROPHIL_BOX_MARGIN + 1
        # the detection box (with margin) stays inside one base patch
        if int((box[0] - mb) // PATCH) != int((box[2] + mb) // PATCH) or int((box[1] - mb) // PATCH) != int((box[3] + mb) // PATCH):
            continue
        if _inside_rect(box, rect, margin=4) and occ.free(box) and not _near_shape(box, shapes, 4):
            occ.add(box)
            neutros.append(n)
    return cells, masses, neutros


# ---------------------------------------------------------------- drawing

def _local_grid(box, y0, x0, h, w):
    """Slices of the local map covered by ``box`` and pixel-centre coordinates."""
    sx0, sy0 = max(int(math.floor(box[0])), x0), max(int(math.floor(box[1])), y0)
    sx1, sy1 = min(int(math.ceil(box[2])) + 1, x0 + w), min(int(math.ceil(box[3])) + 1, y0 + h)
    if sx1 <= sx0 or sy1 <= sy0:
        return None
    xx = np.arange(sx0, sx1) + 0.5
    yy = np.arange(sy0, sy1) + 0.5
    return (slice(sy0 - y0, sy1 - y0), slice(sx0 - x0, sx1 - x0)), yy[:, None], xx[None, :]


def _draw_cell(c: _Cell, hmap, emap, cover, y0, x0):
    g = _local_grid(c.bbox(), y0, x0, *hmap.shape)
    if g is None:
        return
    sl, yy, xx = g
    dx, dy = xx - c.cx, yy - c.cy
    ct, st = math.cos(c.theta), math.sin(c.theta)
    u = (dx * ct + dy * st) / c.a
    v = (-dx * st + dy * ct) / c.b
    body = u * u + v * v <= 1.0
    nuc = dx * dx + dy * dy <= c.rn * c.rn
    emap[sl] += c.c_cyto * (body & ~nuc)
    hmap[sl] += c.c_nuc * nuc
    cover[sl] |= body


def _draw_disk(cx, cy, r, value, target, cover, y0, x0):
    g = _local_grid((cx - r, cy - r, cx + r, cy + r), y0, x0, *target.shape)
    if g is None:
        return
    sl, yy, xx = g
    d = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    target[sl] += value * d
    if cover is not None:
        cover[sl] |= d


def _seam_mask(grid: GridArtifact | None, y0, x0, h, w):
    if grid is None:
        return None
    ys = (np.arange(y0, y0 + h) % grid.period) < grid.width
    xs = (np.arange(x0, x0 + w) % grid.period) < grid.width
    return ys[:, None] | xs[None, :]


def _overlaps_rect(box, x, y, w, h) -> bool:
    return not (box[2] <= x or box[0] >= x + w or box[3] <= y or box[1] >= y + h)


@dataclass
class _Scene:
    spec: SyntheticSceneSpec
    cells: list
    masses: list
    neutrophils: list
    basis: StainBasis

    def objects_in(self, x, y, w, h):
        cells = [c for c in self.cells if _overlaps_rect(c.bbox(), x, y, w, h)]
        for m in self.masses:
            if _overlaps_rect(m.bbox(), x, y, w, h):
                cells.extend(m.members)
        neut = [n for n in self.neutrophils if _overlaps_rect(n.bbox(), x, y, w, h)]
        return cells, neut


def _render_region(scene: _Scene, y0, x0, h, w):
    """Concentration maps (H, E, ink, rim) for base region [y0, y0+h) x [x0, x0+w)."""
    spec = scene.spec
    hmap = np.zeros((h, w))
    emap = np.zeros((h, w))
    ink = np.zeros((h, w))
    rim = np.zeros((h, w))
    cover = np.zeros((h, w), dtype=bool)
    cells, neut = scene.objects_in(x0, y0, w, h)
    for c in cells:
        _draw_cell(c, hmap, emap, cover, y0, x0)
    for n in neut:
        _draw_disk(n.cx, n.cy, n.r, n.c, hmap, cover, y0, x0)
    if spec.wash > 0:
        inside = np.zeros((h, w), dtype=bool)
        for rx, ry, rw, rh in spec.content:
            ya, yb = max(ry, y0), min(ry + rh, y0 + h)
            xa, xb = max(rx, x0), min(rx + rw, x0 + w)
            if ya < yb and xa < xb:
                inside[ya - y0 : yb - y0, xa - x0 : xb - x0] = True
        emap += spec.wash * (inside & ~cover)
    yy = (np.arange(y0, y0 + h) + 0.5)[:, None]
    xx = (np.arange(x0, x0 + w) + 0.5)[None, :]
    for m in spec.markers:
        if _overlaps_rect(m.bbox, x0, y0, w, h):
            ink += spec.marker_density * m.contains(xx, yy)
    for b in spec.bubbles:
        if _overlaps_rect(b.bbox, x0, y0, w, h):
            d2 = (xx - b.cx) ** 2 + (yy - b.cy) ** 2
            rim += BUBBLE_OD * ((d2 <= b.r**2) & (d2 >= (b.r - BUBBLE_RIM) ** 2))
    return np.stack([hmap, emap, ink, rim])


def _tile_maps(scene: _Scene, ty, tx):
    """Concentration maps for one 512 px base tile, after defocus blur."""
    spec = scene.spec
    y0, x0 = ty * PATCH, tx * PATCH
    h, w = min(PATCH, spec.height - y0), min(PATCH, spec.width - x0)
    blurs = [b for b in spec.blur if _overlaps_rect((b.x, b.y, b.x + b.w, b.y + b.h), x0, y0, w, h)]
    margin = int(math.ceil(4 * max((b.sigma for b in blurs), default=0)))
    ry0, rx0 = max(0, y0 - margin), max(0, x0 - margin)
    ry1, rx1 = min(spec.height, y0 + h + margin), min(spec.width, x0 + w + margin)
    maps = _render_region(scene, ry0, rx0, ry1 - ry0, rx1 - rx0)
    if blurs:
        out = maps.copy()
        for b in blurs:
            blurred = np.stack([gaussian_filter(m, b.sigma, mode="nearest") for m in maps])
            ya, yb = max(b.y, ry0) - ry0, min(b.y + b.h, ry1) - ry0
            xa, xb = max(b.x, rx0) - rx0, min(b.x + b.w, rx1) - rx0
            out[:, ya:yb, xa:xb] = blurred[:, ya:yb, xa:xb]
        maps = out
    return maps[:, y0 - ry0 : y0 - ry0 + h, x0 - rx0 : x0 - rx0 + w], (y0, x0, h, w)


def _intensity(maps, basis: StainBasis, spec: SyntheticSceneSpec, y0, x0):
    h, w = maps.shape[1:]
    od = (
        maps[0][..., None] * np.asarray(basis.h)
        + maps[1][..., None] * np.asarray(basis.e)
        + maps[2][..., None] * (np.asarray(INK) / np.linalg.norm(INK))
        + maps[3][..., None] * (np.asarray(NEUTRAL) / np.linalg.norm(NEUTRAL))
    )
    img = spec.background * 10.0 ** (-od)
    seam = _seam_mask(spec.grid, y0, x0, h, w)
    if seam is not None:
        img = img - spec.grid.amplitude * seam[..., None]
    return img


def _tile_noise(spec: SyntheticSceneSpec, ty, tx, h, w):
    if spec.noise_sigma == 0:
        return np.zeros((h, w))
    rng = np.random.default_rng([spec.seed, 7919, ty, tx])
    return rng.normal(0.0, spec.noise_sigma, (h, w))


def _quantize(img):
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


# -------------------------------------------------------------- artifacts

def _detections(scene: _Scene, level: str, rng) -> list:
    spec = scene.spec
    dets = []

    def emit(cls, box, conf):
        gx0, gy0 = max(0.0, box[0]), max(0.0, box[1])
        gx1, gy1 = min(float(spec.width), box[2]), min(float(spec.height), box[3])
        cx, cy = (gx0 + gx1) / 2, (gy0 + gy1) / 2
        i, j = int(cy // PATCH), int(cx // PATCH)
        dets.append(_clip_det(level, i, j, cls, gx0, gy0, gx1, gy1, conf))
        if not spec.border_fragments:
            return
        px0, py0, px1, py1 = j * PATCH, i * PATCH, (j + 1) * PATCH, (i + 1) * PATCH
        crosses_x = gx0 < px0 or gx1 > px1
        crosses_y = gy0 < py0 or gy1 > py1
        if crosses_x and crosses_y:
            return
        if gx1 > px1 and gx1 - px1 <= FRAGMENT_MAX:
            dets.append(_clip_det(level, i, j + 1, cls, gx0, gy0, gx1, gy1, conf))
        if gx0 < px0 and px0 - gx0 <= FRAGMENT_MAX:
            dets.append(_clip_det(level, i, j - 1, cls, gx0, gy0, gx1, gy1, conf))
        if gy1 > py1 and gy1 - py1 <= FRAGMENT_MAX:
            dets.append(_clip_det(level, i + 1, j, cls, gx0, gy0, gx1, gy1, conf))
        if gy0 < py0 and py0 - gy0 <= FRAGMENT_MAX:
            dets.append(_clip_det(level, i - 1, j, cls, gx0, gy0, gx1, gy1, conf))

    for c in scene.cells:
        emit("squamous_cell", c.bbox(), 0.95)
    for m in scene.masses:
        emit("cell_mass", m.bbox(), 0.9)
    mb = NEUTROPHIL_BOX_MARGIN
    for n in scene.neutrophils:
        emit("neutrophil", (n.cx - n.r - mb, n.cy - n.r - mb, n.cx + n.r + mb, n.cy + n.r + mb), 0.9)
    cell = PATCH
    patches = sorted(_content_patches(spec.content, cell))
    for _ in range(spec.false_positives if patches else 0):
        i, j = patches[int(rng.integers(len(patches)))]
        cls = ("squamous_cell", "cell_mass", "neutrophil")[int(rng.integers(3))]
        x, y = rng.uniform(0, PATCH - 30), rng.uniform(0, PATCH - 30)
        dets.append(Detection(level, i, j, cls, float(x), float(y), 24.0, 24.0, float(rng.uniform(0.05, 0.45))))
    return dets


def _clip_det(level, i, j, cls, gx0, gy0, gx1, gy1, conf) -> Detection:
    px0, py0 = j * PATCH, i * PATCH
    x0, y0 = max(gx0, px0) - px0, max(gy0, py0) - py0
    x1, y1 = min(gx1, px0 + PATCH) - px0, min(gy1, py0 + PATCH) - py0
    return Detection(level, i, j, cls, float(x0), float(y0), float(x1 - x0), float(y1 - y0), conf)


def _masks(spec: SyntheticSceneSpec, level: str, cell: int) -> list:
    fa = spec.artifact_factor
    out = []
    for (i, j) in sorted(_content_patches(spec.content, cell)):
        ys = (np.arange(i * PATCH, (i + 1) * PATCH) + 0.5) / float(fa)
        xs = (np.arange(j * PATCH, (j + 1) * PATCH) + 0.5) / float(fa)
        yy, xx = ys[:, None], xs[None, :]
        pbox = (j * cell, i * cell, (j + 1) * cell, (i + 1) * cell)
        for cls, shapes in (("marker", spec.markers), ("bubble", spec.bubbles)):
            bits = np.zeros((PATCH, PATCH), dtype=bool)
            for s in shapes:
                if _boxes_overlap(s.bbox, pbox):
                    bits |= s.contains(xx, yy)
            if bits.any():
                out.append(SegMask(level, i, j, cls, bits))
    return out


# ------------------------------------------------------------ ground truth

def background_variance(noise_sigma: float, downsample: int) -> float:
    """Expected gray variance of flat background after box downsampling.

    Base pixels carry N(0, sigma^2) luminance noise and are rounded (adds
    1/12); an s x s box mean divides by s^2 and is rounded again (adds ~1/12
    unless no resampling happens).
    """
    base = noise_sigma**2 + 1.0 / 12.0
    if downsample == 1:
        return base
    return base / downsample**2 + 1.0 / 12.0


def grid_variance(grid: GridArtifact | None, factor: Fraction) -> float:
    if grid is None or grid.amplitude == 0:
        return 0.0
    per_axis = float(grid.width * factor) / float(grid.period * factor)
    p = 1.0 - (1.0 - per_axis) ** 2
    return grid.amplitude**2 * p * (1.0 - p)


@dataclass
class SyntheticSlide:
    path: Path
    spec: SyntheticSceneSpec
    artifacts: BackendArtifactSet
    truth: MetricVector
    extras: dict

    def open(self):
        return open_slide(self.path)


def generate_slide(spec: SyntheticSceneSpec, out_dir, cal: StainCalibration = StainCalibration()) -> SyntheticSlide:
    """Render ``spec`` as a tile tree under ``out_dir``.

    Returns the slide path, the oracle artifact set and the ground-truth
    metric vector. q2 has no analytic truth (it depends on the focus model)
    and is reported as not evaluable.
    """
    cell = _validate(spec)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    basis = StainBasis()
    cells, masses, neutros = _place(spec, rng)
    scene = _Scene(spec, cells, masses, neutros, basis)

    base = np.zeros((spec.height, spec.width, 3), dtype=np.uint8)
    det_patches = _content_patches(spec.content, PATCH)
    shapes = list(spec.markers) + list(spec.bubbles)
    sums = {"hematoxylin": 0.0, "eosin": 0.0}
    counts = {"hematoxylin": 0, "eosin": 0}
    for ty in range(math.ceil(spec.height / PATCH)):
        for tx in range(math.ceil(spec.width / PATCH)):
            maps, (y0, x0, h, w) = _tile_maps(scene, ty, tx)
            clean = _intensity(maps, basis, spec, y0, x0)
            noisy = clean + _tile_noise(spec, ty, tx, h, w)[..., None]
            base[y0 : y0 + h, x0 : x0 + w] = _quantize(noisy)
            if (ty, tx) in det_patches:
                yy = (np.arange(y0, y0 + h) + 0.5)[:, None]
                xx = (np.arange(x0, x0 + w) + 0.5)[None, :]
                keep = np.ones((h, w), dtype=bool)
                for s in shapes:
                    if _overlaps_rect(s.bbox, x0, y0, w, h):
                        keep &= ~s.contains(xx, yy)
                gray = 0.299 * clean[..., 0] + 0.587 * clean[..., 1] + 0.114 * clean[..., 2]
                for name, conc in (("hematoxylin", maps[0]), ("eosin", maps[1])):
                    sel = (conc > spec.tau) & keep
                    sums[name] += float(gray[sel].sum())
                    counts[name] += int(sel.sum())

    factors = [as_fraction(f) for f in spec.level_factors]
    slide_path = write_tile_tree(out_dir / f"synth_{spec.seed:04d}", base, factors, spec.base_magnification)

    det_level = mag_label(spec.base_magnification)
    art_level = mag_label(spec.artifact_magnification)
    artifacts = BackendArtifactSet(
        masks=_masks(spec, art_level, cell),
        detections=_detections(scene, det_level, rng),
        provenance="oracle",
        meta={"producer": "wsiqc.synth", "version": "1"},
    )

    truth = MetricVector()
    art_rows = math.ceil(int(spec.height * spec.artifact_factor) / PATCH)
    art_cols = math.ceil(int(spec.width * spec.artifact_factor) / PATCH)
    art_content = _content_patches(spec.content, cell)
    n_white = art_rows * art_cols - len(art_content)
    downsample = 1 / spec.artifact_factor
    if n_white >= 5 and downsample.denominator == 1:
        v_nogrid = background_variance(spec.noise_sigma, int(downsample))
        v_grid = grid_variance(spec.grid, spec.artifact_factor)
        truth["q1"] = MetricValue.of(max(0.0, 1.0 - v_grid / v_nogrid), v_nogrid=v_nogrid, v_grid=v_grid)
    else:
        truth["q1"] = MetricValue.missing("fewer than five background patches")
    truth["q2"] = MetricValue.missing(
        "depends on the focus model",
        blurred_area=sum(b.w * b.h for b in spec.blur),
    )
    m_art = len(art_content)
    if m_art:
        f2 = float(spec.artifact_factor) ** 2
        for name, shapes_ in (("q3", spec.markers), ("q4", spec.bubbles)):
            area = sum(s.area for s in shapes_) * f2
            truth[name] = MetricValue.of(max(0.0, 1.0 - area / (m_art * PATCH * PATCH)), area=area)
    else:
        truth["q3"] = MetricValue.missing("no content")
        truth["q4"] = MetricValue.missing("no content")
    v_gray = {k: (sums[k] / counts[k] if counts[k] else None) for k in sums}
    scores = {k: score_q5(v, *cal.range_for(k)) for k, v in v_gray.items() if v is not None}
    truth["q5"] = MetricValue.of(min(scores.values()), **v_gray) if scores else MetricValue.missing("no stained pixels")
    m20 = len(det_patches)
    if m20:
        truth["q6"] = MetricValue.of(q6_from_count(len(cells)), count=len(cells))
        truth["q7"] = MetricValue.of(q7_from_mass_count(len(masses)), count=len(masses))
        s_n = sum(math.pi * n.r**2 for n in neutros)
        q8, annotation = q8_from_areas(s_n, m20 * PATCH * PATCH)
        truth["q8"] = MetricValue.of(q8, s_neutrophil=s_n, annotation=annotation)
    else:
        for name in ("q6", "q7", "q8"):
            truth[name] = MetricValue.missing("no content")
    extras = {
        "content_patches_artifact": sorted(art_content),
        "content_patches_detection": sorted(det_patches),
        "n_cells": len(cells),
        "n_masses": len(masses),
        "n_neutrophils": len(neutros),
    }
    return SyntheticSlide(slide_path, spec, artifacts, truth, extras)


def write_synthetic(spec: SyntheticSceneSpec, out_dir) -> SyntheticSlide:
    """``generate_slide`` plus oracle artifacts and truth written next to the slide."""
    s = generate_slide(spec, out_dir)
    out_dir = Path(out_dir)
    write_file_backend(s.artifacts, out_dir / "oracle")
    (out_dir / "truth.json").write_text(json.dumps({"metrics": s.truth.to_dict(), "extras": s.extras}, indent=2, sort_keys=True))
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return s


def random_scene(seed: int, size: int = 3072, artifact_magnification: float = 10,
                 level_factors=("1", "1/2")) -> SyntheticSceneSpec:
    """A varied scene for end-to-end tests: 2-4 content patches at the artifact level."""
    rng = np.random.default_rng([seed, 101])
    fa = as_fraction(artifact_magnification) / 20
    cell = int(PATCH / fa)
    n = size // cell
    all_cells = [(i, j) for i in range(n) for j in range(n)]
    n_content = int(rng.integers(2, min(5, len(all_cells) - 5) + 1))
    picks = rng.choice(len(all_cells), n_content, replace=False)
    content = [[all_cells[k][1] * cell, all_cells[k][0] * cell, cell, cell] for k in sorted(picks)]

    def shape_in(rect, r):
        x, y, w, h = rect
        return x + rng.uniform(r + 8, w - r - 8), y + rng.uniform(r + 8, h - r - 8)

    markers, bubbles = [], []
    for _ in range(int(rng.integers(0, 3))):
        rect = content[int(rng.integers(len(content)))]
        r = float(rng.uniform(8, 30))
        x0, y0 = shape_in(rect, r + 150)
        ang = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(50, 280)
        cand = MarkerStroke(x0, y0, x0 + length * math.cos(ang), y0 + length * math.sin(ang), r)
        if all(not _boxes_overlap(cand.bbox, m.bbox) for m in markers):
            markers.append(cand)
    for _ in range(int(rng.integers(0, 3))):
        rect = content[int(rng.integers(len(content)))]
        r = float(rng.uniform(30, 140))
        cx, cy = shape_in(rect, r)
        cand = Bubble(cx, cy, r)
        if all(not _boxes_overlap(cand.bbox, b.bbox) for b in bubbles):
            bubbles.append(cand)
    grid = None
    if rng.uniform() < 0.6:
        grid = GridArtifact(int(rng.integers(2, 9)), 256, 4 if cell % 5 else 10)
    blur = []
    if rng.uniform() < 0.4:
        x, y, w, h = content[0]
        blur.append(BlurRegion(x, y, w, h // 2, float(rng.uniform(1.5, 4.0))))
    area_patches = n_content * (cell // PATCH) ** 2
    return SyntheticSceneSpec(
        width=size,
        height=size,
        seed=seed,
        level_factors=level_factors,
        artifact_magnification=artifact_magnification,
        content=content,
        cells=int(rng.integers(20, 60) * area_patches),
        masses=int(rng.integers(0, 10) * area_patches),
        neutrophils=int(rng.integers(0, 60) * area_patches),
        cytoplasm=float(rng.uniform(0.2, 0.4)),
        nucleus=float(rng.uniform(0.18, 0.5)),
        neutrophil_stain=float(rng.uniform(0.4, 0.8)),
        markers=markers,
        bubbles=bubbles,
        blur=blur,
        grid=grid,
        false_positives=int(rng.integers(0, 20)),
    )


# ------------------------------------------------------------ blur ladder

def blur_ladder(scenes: int, levels: int = 12, seed: int = 0, size: int = 64,
                max_sigma: float = 4.4, noise_sigma: float = 3.0, cytoplasm: float = 0.3, nucleus: float = 0.35):
    """Each of ``scenes`` small cytology scenes rendered at ``levels`` defocus steps.

    Returns (windows uint8 (scenes*levels, size, size, 3), level index, target)
    where level 0 is in focus and the target falls linearly from 12 to 0.
    Scenes hold 3-6 cells of fixed stain strength, at least one of them
    centred in the window, so blur is the dominant source of variation.
    """
    rng = np.random.default_rng([seed, 2024])
    spec = SyntheticSceneSpec(width=size, height=size, cytoplasm=cytoplasm, nucleus=nucleus)
    basis = StainBasis()
    margin = int(math.ceil(4 * max_sigma)) + 2
    big = size + 2 * margin
    sigmas = np.linspace(0.0, max_sigma, levels)
    windows, lv, targets = [], [], []
    for _ in range(scenes):
        cells = [_make_cell(rng, rng.uniform(0.35, 0.65) * big, rng.uniform(0.35, 0.65) * big, spec)]
        for _ in range(int(rng.integers(2, 6))):
            cells.append(_make_cell(rng, rng.uniform(0, big), rng.uniform(0, big), spec))
        hmap, emap = np.zeros((big, big)), np.zeros((big, big))
        cover = np.zeros((big, big), dtype=bool)
        for c in cells:
            _draw_cell(c, hmap, emap, cover, 0, 0)
        emap += 0.12 * ~cover
        noise = rng.normal(0, noise_sigma, (big, big))[..., None]
        for k in range(levels):
            maps = (hmap, emap)
            if sigmas[k] > 0:
                maps = [gaussian_filter(m, sigmas[k], mode="nearest") for m in maps]
            od = maps[0][..., None] * np.asarray(basis.h) + maps[1][..., None] * np.asarray(basis.e)
            img = 236.0 * 10.0 ** (-od) + noise
            windows.append(_quantize(img[margin : margin + size, margin : margin + size]))
            lv.append(k)
            targets.append(12.0 * (1.0 - k / (levels - 1)))
    return np.stack(windows), np.asarray(lv), np.asarray(targets)


def ground_truth_dict(truth: MetricVector) -> dict:
    return {n: (truth[n].value if truth[n].evaluable else None) for n in METRIC_NAMES}
