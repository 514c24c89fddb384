"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 input error, 3 evaluation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EvaluationError, InputError, StageError, WsiqcError

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_EVAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "backend", None):
        overrides["backend"] = args.backend
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    if overrides:
        d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        d.update(overrides)
        cfg = PipelineConfig(**d)
    return cfg


def cmd_evaluate(args) -> int:
    from .heatmap import emit_report_heatmaps
    from .pipeline import evaluate
    from .pyramid import open_slide

    cfg = _config(args)
    rep = evaluate(args.slide, cfg)
    text = rep.to_json()
    if args.report:
        Path(args.report).write_text(text)
    else:
        print(text)
    if args.heatmaps:
        for p in emit_report_heatmaps(rep, args.heatmaps, open_slide(args.slide)):
            print(f"heatmap: {p}", file=sys.stderr)
    return EXIT_OK


def cmd_batch(args) -> int:
    from .pipeline import batch_evaluate

    cfg = _config(args)
    lst = Path(args.list_file)
    slides = []
    for line in lst.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            slides.append(p if p.is_absolute() else lst.parent / p)
    res = batch_evaluate(slides, cfg, report_dir=args.reports, log=lambda m: print(m, file=sys.stderr))
    if args.summary:
        Path(args.summary).write_text(res.summary_csv)
    else:
        sys.stdout.write(res.summary_csv)
    return EXIT_INPUT if res.errors else EXIT_OK


def _reference_items(directory: Path):
    """Slides (tile-tree dirs or TIFF files, also one level down) and loose PNG patches."""
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    slides, pngs = [], []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() == ".png":
            pngs.append(p)
        elif p.suffix.lower() in (".tif", ".tiff") or (p / "manifest.json").is_file():
            slides.append(p)
        elif p.is_dir():
            slides.extend(sorted(q.parent for q in p.glob("*/manifest.json")))
    return slides, pngs


def cmd_calibrate_grid(args) -> int:
    from .grid import calibrate_grid
    from .imaging import read_png
    from .pyramid import iter_patches, open_slide

    slides, pngs = _reference_items(Path(args.dir))
    patches = [read_png(p) for p in pngs]
    for s in slides:
        patches.extend(p.valid_pixels for p in iter_patches(open_slide(s), args.mag) if p.is_white)
    cal = calibrate_grid(patches)
    cal.save(args.out)
    print(f"v_nogrid {cal.v_nogrid:.6g} from {cal.sample_count} patches -> {args.out}")
    return EXIT_OK


def cmd_calibrate_stain(args) -> int:
    from .pipeline import PipelineConfig, evaluate
    from .stain import calibrate_stain

    slides, _ = _reference_items(Path(args.dir))
    cfg = _config(args)
    rows = []
    for s in slides:
        rep = evaluate(s, cfg)
        q5 = rep.metrics["q5"]
        if not q5.evaluable or any(q5.raw["v_gray"].get(ch) is None for ch in ("hematoxylin", "eosin")):
            print(f"{s}: no stain measurement, skipped", file=sys.stderr)
            continue
        rows.append(q5.raw["v_gray"])
    cal = calibrate_stain(rows)
    cal.save(args.out)
    print(f"hematoxylin {cal.hematoxylin}, eosin {cal.eosin} from {cal.sample_count} slides -> {args.out}")
    return EXIT_OK


def cmd_train_score(args) -> int:
    from .score import GbdtConfig, load_labels_csv, rmse, train_gbdt
    from .stats import plcc, srcc

    rows = load_labels_csv(args.labels)
    cfg = GbdtConfig(args.rounds, args.depth, args.eta, args.lam, args.gamma)
    model = train_gbdt(rows, cfg)
    model.meta = {"labels": str(args.labels), "rows": len(rows)}
    model.save(args.out)
    pred = model.predict(np.array([r[0] for r in rows]))
    y = np.array([r[1] for r in rows])
    print(json.dumps({"rows": len(rows), "rmse": rmse(model, rows), "plcc": _safe(plcc, pred, y),
                      "srcc": _safe(srcc, pred, y), "model": str(args.out)}))
    return EXIT_OK


def _safe(fn, x, y):
    try:
        return fn(x, y)
    except EvaluationError:
        return None


def cmd_train_focus(args) -> int:
    from .focus import TrainConfig, predict_batch, train_focus
    from .imaging import read_png
    from .stats import srcc

    d = Path(args.dataset_dir)
    labels = d / "labels.csv"
    if not labels.is_file():
        raise InputError(f"{labels} not found (columns: file, score)")
    data = []
    with open(labels, newline="") as fh:
        for r in csv.DictReader(fh):
            data.append((read_png(d / r["file"]), float(r["score"])))
    if not data:
        raise InputError("empty focus dataset")
    w = train_focus(data, TrainConfig(epochs=args.epochs, learning_rate=args.lr, n_filters=args.filters, seed=args.seed),
                    log=lambda m: print(m, file=sys.stderr))
    w.save(args.out)
    pred = predict_batch(np.stack([x for x, _ in data]), w)
    print(json.dumps({"windows": len(data), "srcc": _safe(srcc, pred, [t for _, t in data]), "weights": str(args.out)}))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SyntheticSceneSpec, write_synthetic

    spec = SyntheticSceneSpec.load(args.spec)
    s = write_synthetic(spec, args.out_dir)
    print(json.dumps({"slide": str(s.path), "oracle": str(Path(args.out_dir) / "oracle"),
                      "truth": str(Path(args.out_dir) / "truth.json")}))
    return EXIT_OK


def cmd_synth_ladder(args) -> int:
    from .imaging import write_png
    from .synth import blur_ladder

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    windows, levels, targets = blur_ladder(args.scenes, seed=args.seed)
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["file", "score", "level"])
        for k, (x, lv, t) in enumerate(zip(windows, levels, targets)):
            name = f"w{k:05d}.png"
            write_png(out / name, x)
            wr.writerow([name, repr(float(t)), int(lv)])
    print(f"{len(windows)} windows -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsiqc", description="Whole-slide cytology quality control")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, backend=True):
        sp.add_argument("--config", help="TOML pipeline configuration")
        if backend:
            sp.add_argument("--backend", help="none | oracle | files:<dir>")
        sp.add_argument("--workers", type=int, help="patch worker threads")

    e = sub.add_parser("evaluate", help="evaluate one slide")
    e.add_argument("slide")
    common(e)
    e.add_argument("--report", help="write the JSON report here instead of stdout")
    e.add_argument("--heatmaps", help="directory for per-metric heatmap PNGs")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("batch", help="evaluate every slide listed in a file")
    b.add_argument("list_file")
    common(b)
    b.add_argument("--summary", help="summary CSV path (default stdout)")
    b.add_argument("--reports", help="directory for per-slide JSON reports")
    b.set_defaults(func=cmd_batch)

    g = sub.add_parser("calibrate-grid", help="no-grid background variance from reference slides/patches")
    g.add_argument("dir")
    g.add_argument("--out", default="grid_calibration.json")
    g.add_argument("--mag", type=float, default=4)
    g.set_defaults(func=cmd_calibrate_grid)

    s = sub.add_parser("calibrate-stain", help="standard stain gray ranges from >= 20 reference slides")
    s.add_argument("dir")
    common(s)
    s.add_argument("--out", default="stain_calibration.json")
    s.set_defaults(func=cmd_calibrate_stain)

    t = sub.add_parser("train-score", help="fit the score model to a labels CSV (q1..q8,label)")
    t.add_argument("labels")
    t.add_argument("--out", default="score_model.json")
    t.add_argument("--rounds", type=int, default=100)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--eta", type=float, default=0.1)
    t.add_argument("--lam", type=float, default=1.0)
    t.add_argument("--gamma", type=float, default=0.0)
    t.set_defaults(func=cmd_train_score)

    f = sub.add_parser("train-focus", help="train the sharpness network on labelled windows")
    f.add_argument("dataset_dir")
    f.add_argument("--out", default="focus_weights.json")
    f.add_argument("--epochs", type=int, default=200)
    f.add_argument("--lr", type=float, default=0.01)
    f.add_argument("--filters", type=int, default=2)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_train_focus)

    y = sub.add_parser("synth", help="render a synthetic slide with oracle artifacts and ground truth")
    y.add_argument("spec")
    y.add_argument("out_dir")
    y.set_defaults(func=cmd_synth)

    yl = sub.add_parser("synth-ladder", help="write a synthetic blur-ladder focus dataset")
    yl.add_argument("out_dir")
    yl.add_argument("--scenes", type=int, default=80)
    yl.add_argument("--seed", type=int, default=0)
    yl.set_defaults(func=cmd_synth_ladder)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"wsiqc: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc.cause, InputError) else EXIT_EVAL
    except InputError as exc:
        print(f"wsiqc: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EvaluationError, WsiqcError) as exc:
        print(f"wsiqc: evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (OSError, ValueError) as exc:
        print(f"wsiqc: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
