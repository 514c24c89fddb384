import numpy as np
import pytest
from PIL import Image

from wsiqc.heatmap import CELL, emit_heatmap, emit_report_heatmaps, normalize_scores, render_heatmap


def test_uniform_scores_one_colour():
    hm = render_heatmap({(i, j): 0.7 for i in range(3) for j in range(4)}, 3, 4)
    assert set(hm.normalized.values()) == {0.5}
    assert len(set(hm.colors.values())) == 1
    assert len({tuple(c) for c in hm.image.reshape(-1, 3)}) == 1


def test_two_level_scores_two_colours():
    scores = {(0, j): (0.2 if j % 2 else 0.9) for j in range(6)}
    hm = render_heatmap(scores, 1, 6)
    assert sorted(set(hm.normalized.values())) == [0.0, 1.0]
    assert len(set(hm.colors.values())) == 2
    assert hm.image.shape == (CELL, 6 * CELL, 3)


def test_normalisation():
    assert normalize_scores({"a": 1.0, "b": 3.0, "c": 2.0}) == {"a": 0.0, "b": 1.0, "c": 0.5}
    with pytest.raises(ValueError):
        normalize_scores({})


def test_emit_writes_png(tmp_path):
    hm = emit_heatmap({"0,0": 0.1, "1,2": 0.9}, "q3", tmp_path / "out" / "h.png")
    img = np.asarray(Image.open(tmp_path / "out" / "h.png"))
    assert img.shape == (2 * CELL, 3 * CELL, 3)
    assert np.array_equal(img, hm.image)


def test_report_heatmaps_over_slide(tmp_path, synth_slide, e2e_models):
    from wsiqc.pipeline import PipelineConfig, evaluate

    from conftest import E2E_MAGS

    rep = evaluate(synth_slide.path, PipelineConfig(magnifications=dict(E2E_MAGS), backend="oracle"), models=e2e_models)
    paths = emit_report_heatmaps(rep, tmp_path, synth_slide.open())
    assert {p.name.rsplit("_", 1)[1] for p in paths} == {"q2.png", "q3.png", "q4.png", "q8.png"}
