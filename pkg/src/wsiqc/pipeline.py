"""Two-magnification slide evaluation: tiling, metric dispatch, score and report."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .artifacts import score_occlusion
from .backends import BackendArtifactSet, empty_backend, load_file_backend
from .content import CONFIDENCE_FLOOR, box_area, deduplicate, measure_content
from .errors import EvaluationError, InputError, StageError, WsiqcError
from .focus import FocusNetWeights, default_weights, q2_from_patch_scores, score_patch
from .grid import GridCalibration, background_stats, compute_q1, select_content_free_patches
from .imaging import PATCH, as_fraction, mag_label, parse_mag_label
from .metrics import METRIC_NAMES, MetricValue, MetricVector
from .pyramid import open_slide
from .score import GbdtModel, SlideDecision, decide, default_model, predict_score
from .stain import CHANNELS, StainAccumulator, StainBasis, StainCalibration, estimate_basis, patch_stain_sums

DEFAULT_MAGNIFICATIONS = {"q1": 4, "q2": 20, "q3": 4, "q4": 4, "q5": 20, "q6": 20, "q7": 20, "q8": 20}
BASIS_SAMPLE_STRIDE = 4
STAGES = ("tiling", "backend", "models", "low_pass", "high_pass", "stain", "score")


@dataclass
class PipelineConfig:
    magnifications: dict = field(default_factory=lambda: dict(DEFAULT_MAGNIFICATIONS))
    sample_every: int = 1
    workers: int = 1
    grid_calibration: str | None = None
    stain_calibration: str | None = None
    focus_weights: str | None = None
    score_model: str | None = None
    backend: str = "none"  # none | oracle | files:<dir>
    stain_basis: str = "adaptive"  # adaptive | fixed
    background_intensity: object = "auto"  # "auto" or [r, g, b]
    confidence_floor: float = CONFIDENCE_FLOOR

    def __post_init__(self):
        mags = dict(DEFAULT_MAGNIFICATIONS)
        mags.update(self.magnifications)
        unknown = set(mags) - set(METRIC_NAMES)
        if unknown:
            raise InputError(f"unknown metrics in magnifications: {sorted(unknown)}")
        self.magnifications = {k: mags[k] for k in METRIC_NAMES}
        for k, v in self.magnifications.items():
            try:
                if as_fraction(v) <= 0:
                    raise ValueError
            except (ValueError, TypeError, ZeroDivisionError):
                raise InputError(f"invalid magnification for {k}: {v!r}") from None
        if len({str(as_fraction(self.magnifications[k])) for k in ("q6", "q7", "q8")}) != 1:
            raise InputError("q6, q7 and q8 share one detection magnification")
        if self.sample_every < 1 or self.workers < 1:
            raise InputError("sample_every and workers must be >= 1")
        if self.stain_basis not in ("adaptive", "fixed"):
            raise InputError("stain_basis must be 'adaptive' or 'fixed'")
        bi = self.background_intensity
        if bi != "auto":
            if not (isinstance(bi, (list, tuple)) and len(bi) == 3 and all(0 < float(v) <= 255 for v in bi)):
                raise InputError("background_intensity must be 'auto' or three values in (0, 255]")
            self.background_intensity = [float(v) for v in bi]
        if not (self.backend in ("none", "oracle") or self.backend.startswith("files:")):
            raise InputError(f"unknown backend {self.backend!r}")

    def mag(self, metric: str) -> Fraction:
        return as_fraction(self.magnifications[metric])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["magnifications"] = {k: str(as_fraction(v)) for k, v in self.magnifications.items()}
        return d

    def digest(self) -> str:
        """Hash of every setting that can change a result (worker count cannot)."""
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        d = dict(d)
        flat = {}
        cal = d.pop("calibration", None) or {}
        models = d.pop("models", None) or {}
        if "grid" in cal:
            flat["grid_calibration"] = cal["grid"]
        if "stain" in cal:
            flat["stain_calibration"] = cal["stain"]
        if "focus" in models:
            flat["focus_weights"] = models["focus"]
        if "score" in models:
            flat["score_model"] = models["score"]
        flat.update(d)
        known = set(cls.__dataclass_fields__)
        extra = set(flat) - known
        if extra:
            raise InputError(f"unknown config keys: {sorted(extra)}")
        if base_dir is not None:
            for key in ("grid_calibration", "stain_calibration", "focus_weights", "score_model"):
                if flat.get(key):
                    flat[key] = str((base_dir / flat[key]).resolve()) if not Path(flat[key]).is_absolute() else flat[key]
            b = flat.get("backend", "none")
            if b.startswith("files:") and not Path(b[6:]).is_absolute():
                flat["backend"] = "files:" + str((base_dir / b[6:]).resolve())
        return cls(**flat)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib

        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.parent)


@dataclass
class LoadedModels:
    grid: GridCalibration | None
    stain: StainCalibration
    focus: FocusNetWeights
    score: GbdtModel


def load_models(config: PipelineConfig) -> LoadedModels:
    grid = GridCalibration.load(config.grid_calibration) if config.grid_calibration else default_grid_calibration()
    stain = StainCalibration.load(config.stain_calibration) if config.stain_calibration else StainCalibration()
    focus = FocusNetWeights.load(config.focus_weights) if config.focus_weights else default_weights()
    score = GbdtModel.load(config.score_model) if config.score_model else default_model()
    return LoadedModels(grid, stain, focus, score)


def default_grid_calibration() -> GridCalibration:
    from importlib import resources

    return GridCalibration.from_json(resources.files("wsiqc.data").joinpath("grid_default.json").read_text())


def resolve_backend(spec: str, slide_path) -> BackendArtifactSet:
    """``none`` -> empty set; ``oracle`` -> the ``oracle`` directory next to a
    synthetic slide; ``files:<dir>`` -> that directory."""
    if spec == "none":
        return empty_backend()
    if spec == "oracle":
        d = Path(slide_path).parent / "oracle"
        if not d.is_dir():
            raise InputError(f"no oracle artifacts at {d}")
        s = load_file_backend(d)
        s.provenance = "oracle"
        return s
    return load_file_backend(spec[len("files:"):])


# ---------------------------------------------------------------- report

@dataclass
class QualityReport:
    slide_id: str
    metrics: MetricVector
    score: float | None
    decision: SlideDecision | None
    tbs_annotation: str
    timings: dict
    config_hash: str
    tool_version: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "slide_id": self.slide_id,
            "metrics": self.metrics.to_dict(),
            "score": self.score,
            "decision": self.decision.to_dict() if self.decision else None,
            "tbs_annotation": self.tbs_annotation,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "diagnostics": self.diagnostics,
        }
        if timings:
            d["timings"] = self.timings
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def canonical_json(self) -> str:
        """Everything except timings; byte-identical for identical inputs."""
        return json.dumps(self.to_dict(timings=False), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(
            d["slide_id"],
            MetricVector.from_dict(d["metrics"]),
            d["score"],
            SlideDecision.from_dict(d["decision"]) if d["decision"] else None,
            d["tbs_annotation"],
            dict(d.get("timings", {})),
            d["config_hash"],
            d["tool_version"],
            d.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "QualityReport":
        return cls.from_dict(json.loads(text))


def _plain(obj):
    """JSON-native copy (tuples -> lists, numpy scalars -> python)."""
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


# ------------------------------------------------------------- execution

@contextlib.contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except WsiqcError as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


@contextlib.contextmanager
def worker_pool(workers: int):
    """Ordered map over a bounded thread pool (plain ``map`` for one worker)."""
    if workers <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        yield ex.map


def _key(i, j) -> str:
    return f"{i},{j}"


class _MaskIndex:
    """Union of marker/bubble masks, used to keep occluded pixels out of stain statistics."""

    def __init__(self, masks):
        self.by_level: dict[str, dict] = {}
        for m in masks:
            d = self.by_level.setdefault(m.level, {})
            key = (m.i, m.j)
            d[key] = d[key] | m.bits if key in d else m.bits.copy()

    def exclusion(self, mag: Fraction, i: int, j: int) -> np.ndarray | None:
        """Pixels of patch (i, j) at ``mag`` covered by any mask (nearest-neighbour map)."""
        out = None
        for level, d in self.by_level.items():
            r = parse_mag_label(level) / mag
            gy = i * PATCH + np.arange(PATCH)
            gx = j * PATCH + np.arange(PATCH)
            ay = (gy * r.numerator) // r.denominator
            ax = (gx * r.numerator) // r.denominator
            ai, ly = ay // PATCH, ay % PATCH
            aj, lx = ax // PATCH, ax % PATCH
            for pi in np.unique(ai):
                rows = ai == pi
                for pj in np.unique(aj):
                    bits = d.get((int(pi), int(pj)))
                    if bits is None:
                        continue
                    cols = aj == pj
                    if out is None:
                        out = np.zeros((PATCH, PATCH), dtype=bool)
                    out[np.ix_(rows, cols)] |= bits[np.ix_(ly[rows], lx[cols])]
        return out


def _low_pass(grid, want_bg: bool, mapper):
    def work(ij):
        p = grid.read(*ij)
        bg = background_stats(p) if (want_bg and p.is_white) else None
        sums = p.valid_pixels.reshape(-1, 3).sum(axis=0).astype(np.int64) if bg is not None else None
        return (ij, p.is_white, bg, sums, p.valid_h * p.valid_w)

    return list(mapper(work, grid.coords()))


def _basis_sample(patch, mag, ij, masks: _MaskIndex) -> np.ndarray:
    """Strided unmasked pixels of one patch for stain basis estimation."""
    px = patch.valid_pixels
    keep = np.ones(px.shape[:2], dtype=bool)
    ex = masks.exclusion(mag, *ij)
    if ex is not None:
        keep &= ~ex[: px.shape[0], : px.shape[1]]
    s = BASIS_SAMPLE_STRIDE
    return px[::s, ::s][keep[::s, ::s]]


def _high_pass(grid, focus_w, dets_by_patch, masks: _MaskIndex, want_focus, want_basis, floor, mapper):
    mag = grid.magnification

    def work(ij):
        p = grid.read(*ij)
        out = {"ij": ij, "white": p.is_white, "focus": None, "areas": [], "sample": None}
        for d in dets_by_patch.get(ij, ()):
            out["areas"].append(box_area(p.pixels, d))
        if p.is_white:
            return out
        if want_focus:
            out["focus"] = score_patch(p.pixels, focus_w, valid_shape=(p.valid_h, p.valid_w))
        if want_basis:
            out["sample"] = _basis_sample(p, mag, ij, masks)
        return out

    return list(mapper(work, grid.coords()))


def _stain_pass(grid, content, basis, tau, masks: _MaskIndex, mapper):
    def work(ij):
        p = grid.read(*ij)
        ex = masks.exclusion(grid.magnification, *ij)
        if ex is not None:
            ex = ex[: p.valid_h, : p.valid_w]
        return patch_stain_sums(p.valid_pixels, basis, tau, ex)

    acc = StainAccumulator()
    for sums, counts in mapper(work, content):
        acc.add(sums, counts)
    return acc


def evaluate(slide_path, config: PipelineConfig | None = None, artifacts: BackendArtifactSet | None = None,
             models: LoadedModels | None = None) -> QualityReport:
    """Evaluate one slide. Metric-level failures degrade to not-evaluable;
    input problems raise ``StageError`` naming the stage."""
    config = config or PipelineConfig()
    timings: dict = {}
    metrics = MetricVector()
    diag: dict = {"patch_scores": {}, "content_patches": {}}
    slide_path = Path(slide_path)

    with _stage("tiling", timings):
        slide = open_slide(slide_path)
        grids = {n: slide.grid(config.mag(n)) for n in METRIC_NAMES}
    with _stage("backend", timings):
        if artifacts is None:
            artifacts = resolve_backend(config.backend, slide_path)
        artifacts.validate_against(slide)
    with _stage("models", timings):
        models = models or load_models(config)

    masks = _MaskIndex(artifacts.masks)
    with worker_pool(config.workers) as mapper:
        # ---- low-magnification pass(es): q1 background, q3/q4 content patches
        low: dict = {}
        with _stage("low_pass", timings):
            for name in ("q1", "q3", "q4"):
                mag = config.mag(name)
                if mag not in low:
                    low[mag] = _low_pass(grids[name], True, mapper)
        background_rgb = None
        with _stage("low_pass", timings):
            rec = low[config.mag("q1")]
            g = grids["q1"]
            whites = [bg for _, w, bg, _, _ in rec if w]
            try:
                chosen = select_content_free_patches(whites, g.rows, g.cols)
                if models.grid is None:
                    raise EvaluationError("no grid calibration")
                gm = compute_q1(chosen, models.grid)
                metrics["q1"] = MetricValue.of(gm.q1, v_wsi=gm.v_wsi, v_nogrid=models.grid.v_nogrid,
                                               deviation=gm.deviation, patches=gm.patches, variances=gm.variances)
                picked = {(c.i, c.j) for c in chosen}
                tot = sum((s for ij, _, _, s, _ in rec if ij in picked), np.zeros(3, dtype=np.int64))
                npx = sum(n for ij, _, _, _, n in rec if ij in picked)
                background_rgb = [float(v) / npx for v in tot]
            except EvaluationError as exc:
                metrics["q1"] = MetricValue.missing(str(exc))
            for name, cls in (("q3", "marker"), ("q4", "bubble")):
                mag = config.mag(name)
                label = mag_label(mag)
                content = [(label, i, j) for (i, j), w, _, _, _ in low[mag] if not w]
                diag["content_patches"][label] = len(content)
                occ = score_occlusion([m for m in artifacts.masks if m.level == label], cls, content)
                if occ.quality is None:
                    metrics[name] = MetricValue.missing("no content patches")
                else:
                    metrics[name] = MetricValue.of(occ.quality, n_detected=occ.n_detected, n_content=occ.n_content,
                                                   detected_only=occ.detected_only_quality)
                    diag["patch_scores"][name] = {
                        "magnification": str(mag),
                        "scores": {_key(i, j): 1.0 - occ.ratios.get((label, i, j), 0.0) for _, i, j in content},
                    }

        # ---- high-magnification pass: q2, q5 pixels, q6-q8 detections
        hi_mag = config.mag("q6")
        hi_grid = grids["q6"]
        det_label = mag_label(hi_mag)
        dets = [d for d in artifacts.detections if d.level == det_label]
        floor = config.confidence_floor
        neutros = deduplicate([d for d in dets if d.cls == "neutrophil" and d.conf >= floor])
        by_patch: dict = {}
        for d in neutros:
            by_patch.setdefault((d.i, d.j), []).append(d)
        focus_same = config.mag("q2") == hi_mag and config.sample_every == 1
        stain_same = config.mag("q5") == hi_mag
        with _stage("high_pass", timings):
            hi = _high_pass(hi_grid, models.focus, by_patch, masks, focus_same,
                            stain_same and config.stain_basis == "adaptive", floor, mapper)
            hi_content = [r["ij"] for r in hi if not r["white"]]
            diag["content_patches"][det_label] = len(hi_content)
            cm = measure_content(dets, [a for r in hi for a in r["areas"]], len(hi_content), floor)
            if hi_content:
                metrics["q6"] = MetricValue.of(cm.q6, count=cm.cell_count)
                metrics["q7"] = MetricValue.of(cm.q7, count=cm.mass_count)
                metrics["q8"] = MetricValue.of(cm.q8, s_neutrophil=cm.s_neutrophil, s_total=cm.s_total,
                                               coverage=cm.s_neutrophil / cm.s_total, annotation=cm.tbs_annotation)
                per = {}
                for r in hi:
                    if not r["white"]:
                        per[_key(*r["ij"])] = max(0.0, 1.0 - sum(r["areas"]) / float(PATCH * PATCH))
                diag["patch_scores"]["q8"] = {"magnification": str(hi_mag), "scores": per}
            else:
                for name in ("q6", "q7", "q8"):
                    metrics[name] = MetricValue.missing("no content patches")
            tbs = cm.tbs_annotation if hi_content else "none"

            # q2
            f_grid = grids["q2"]
            if focus_same:
                f_rec = [(r["ij"], r["focus"]) for r in hi if not r["white"]]
            else:
                f_rec = None
            try:
                if f_rec is None:
                    content_f = [r[0] for r in _low_pass(f_grid, False, mapper) if not r[1]]
                    sampled = content_f[:: config.sample_every]
                    vals = list(mapper(lambda ij: _score_one(f_grid, ij, models.focus), sampled))
                    f_rec = list(zip(sampled, vals))
                per = {_key(*ij): v for ij, v in f_rec if v is not None}
                if not per:
                    raise EvaluationError("no content patch holds a focus window")
                scores = list(per.values())
                metrics["q2"] = MetricValue.of(q2_from_patch_scores(scores), y_mean=float(np.mean(scores)),
                                               n_patches=len(scores), sample_every=config.sample_every)
                diag["patch_scores"]["q2"] = {
                    "magnification": str(config.mag("q2")),
                    "scores": {k: min(1.0, max(0.0, v / 12.0)) for k, v in per.items()},
                }
            except EvaluationError as exc:
                metrics["q2"] = MetricValue.missing(str(exc))

        # ---- stain
        with _stage("stain", timings):
            s_grid = grids["q5"]
            if stain_same:
                s_content = hi_content
                samples = [r["sample"] for r in hi if r["sample"] is not None]
            else:
                s_content = [r[0] for r in _low_pass(s_grid, False, mapper) if not r[1]]
                samples = []
                if config.stain_basis == "adaptive":
                    samples = list(mapper(lambda ij: _basis_sample(s_grid.read(*ij), s_grid.magnification, ij, masks), s_content))
            bg = config.background_intensity
            warnings = []
            if bg == "auto":
                if background_rgb is None:
                    warnings.append("background intensity unavailable; using 255")
                    bg = [255.0, 255.0, 255.0]
                else:
                    bg = background_rgb
            cal = models.stain
            default = StainBasis(cal.basis.h, cal.basis.e, tuple(bg))
            if not s_content:
                metrics["q5"] = MetricValue.missing("no content patches")
            else:
                basis = estimate_basis(samples, default=default) if config.stain_basis == "adaptive" else default
                if basis.adaptive_failed:
                    warnings.append("adaptive stain estimation failed; default basis used")
                acc = _stain_pass(s_grid, s_content, basis, cal.tau, masks, mapper)
                sm = acc.finish(cal, basis)
                if sm.q5 is None:
                    metrics["q5"] = MetricValue.missing("no stained pixels above threshold")
                else:
                    metrics["q5"] = MetricValue.of(
                        sm.q5, v_gray=sm.v_gray, counts=sm.counts, scores=sm.scores,
                        basis={"h": list(basis.h), "e": list(basis.e)}, adaptive_failed=basis.adaptive_failed,
                        background_intensity=list(bg),
                    )
                metrics["q5"].warnings.extend(warnings)

    with _stage("score", timings):
        if metrics.any_evaluable:
            score = predict_score(models.score, metrics)
            decision = decide(score, metrics)
        else:
            score, decision = None, None

    for name in METRIC_NAMES:
        metrics[name] = MetricValue.from_dict(_plain(metrics[name].to_dict()))
    diag["backend"] = artifacts.provenance
    diag["magnifications"] = {k: str(v) for k, v in config.to_dict()["magnifications"].items()}
    return QualityReport(
        slide_id=slide_id(slide_path),
        metrics=metrics,
        score=score,
        decision=decision,
        tbs_annotation=tbs,
        timings=timings,
        config_hash=config.digest(),
        tool_version=__version__,
        diagnostics=_plain(diag),
    )


def _score_one(grid, ij, w):
    p = grid.read(*ij)
    return score_patch(p.pixels, w, valid_shape=(p.valid_h, p.valid_w))


def slide_id(path) -> str:
    path = Path(path)
    return path.stem if path.is_file() else path.name


# ------------------------------------------------------------------ batch

SUMMARY_COLUMNS = ("slide_id", *METRIC_NAMES, "score", "action", *(f"t_{s}" for s in STAGES), "error")


@dataclass
class BatchResult:
    reports: list
    errors: list  # (slide path, message)
    summary_csv: str


def batch_evaluate(slides: Sequence, config: PipelineConfig | None = None,
                   report_dir=None, log: Callable[[str], None] | None = None) -> BatchResult:
    """Evaluate slides one after another; a failing slide becomes an error row."""
    config = config or PipelineConfig()
    models = None
    reports, errors = [], []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for path in slides:
        try:
            if models is None:
                models = load_models(config)
            rep = evaluate(path, config, models=models)
        except WsiqcError as exc:
            errors.append((str(path), str(exc)))
            writer.writerow([slide_id(path), *[""] * (len(SUMMARY_COLUMNS) - 2), str(exc)])
            if log:
                log(f"{path}: FAILED {exc}")
            continue
        reports.append(rep)
        if report_dir is not None:
            Path(report_dir).mkdir(parents=True, exist_ok=True)
            (Path(report_dir) / f"{rep.slide_id}.json").write_text(rep.to_json())
        writer.writerow([
            rep.slide_id,
            *[repr(rep.metrics[n].value) for n in METRIC_NAMES],
            "" if rep.score is None else repr(rep.score),
            "" if rep.decision is None else rep.decision.action,
            *[f"{rep.timings.get(s, 0.0):.3f}" for s in STAGES],
            "",
        ])
        if log:
            log(f"{path}: score {rep.score} {rep.decision.action if rep.decision else '-'}")
    return BatchResult(reports, errors, buf.getvalue())
