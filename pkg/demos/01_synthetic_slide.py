"""Render a synthetic slide with known defects, evaluate it, and compare with ground truth.

The generator knows the true value of every analytic metric, so this is the
quickest way to see what each score responds to.

    python demos/01_synthetic_slide.py [out_dir]
"""
import sys
from pathlib import Path

from wsiqc.defaults import build_grid
from wsiqc.heatmap import emit_report_heatmaps
from wsiqc.metrics import DESCRIPTIONS, METRIC_NAMES
from wsiqc.pipeline import PipelineConfig, evaluate, load_models
from wsiqc.synth import BlurRegion, Bubble, GridArtifact, MarkerStroke, SyntheticSceneSpec, write_synthetic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthetic")

# A 4096 px 20x slide. Artifact masks live at 10x, where one patch spans 1024 base pixels.
content = [[1024, 0, 1024, 1024], [0, 1024, 1024, 1024], [1024, 1024, 1024, 1024], [2048, 1024, 1024, 1024],
           [1024, 2048, 1024, 1024], [2048, 3072, 1024, 1024]]
spec = SyntheticSceneSpec(
    width=4096, height=4096, seed=42, artifact_magnification=10, level_factors=("1", "1/2"),
    content=content, cells=1500, masses=60, neutrophils=400,
    markers=[MarkerStroke(1200, 300, 1800, 500, 30)],
    bubbles=[Bubble(1500, 1500, 120)],
    blur=[BlurRegion(2048, 1024, 1024, 1024, 3.0)],
    grid=GridArtifact(amplitude=6, period=256, width=4),
    false_positives=30,
)
print(f"rendering {spec.width}x{spec.height} slide into {out} ...")
slide = write_synthetic(spec, out)

cfg = PipelineConfig(magnifications={"q1": 10, "q3": 10, "q4": 10}, backend="oracle")
models = load_models(cfg)
# background variance shifts with magnification: calibrate at the 10x level used for q1
models.grid = build_grid(downsample=2)
report = evaluate(slide.path, cfg, models=models)

print(f"\n{'metric':<6} {'meaning':<24} {'pipeline':>9} {'truth':>9}")
for n in METRIC_NAMES:
    t = slide.truth[n]
    truth = f"{t.value:.4f}" if t.evaluable else "n/a"
    print(f"{n:<6} {DESCRIPTIONS[n]:<24} {report.metrics[n].value:>9.4f} {truth:>9}")
print(f"\nscore {report.score:.2f} -> {report.decision.action}; below 0.6: {report.decision.reasons or 'none'}")
print(f"TBS annotation: {report.tbs_annotation}")

(out / "report.json").write_text(report.to_json())
for p in emit_report_heatmaps(report, out / "heatmaps", slide.open()):
    print("heatmap:", p)
