import csv
import json

import numpy as np
import pytest

from wsiqc.cli import main
from wsiqc.imaging import write_png


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0


def test_missing_slide_exit_2(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "none")]) == 2


def test_evaluate_writes_report_and_heatmaps(tmp_path, synth_slide, capsys):
    toml = tmp_path / "c.toml"
    toml.write_text('[magnifications]\nq1 = 10\nq3 = 10\nq4 = 10\n')
    code = main(["evaluate", str(synth_slide.path), "--config", str(toml), "--backend", "oracle",
                 "--report", str(tmp_path / "r.json"), "--heatmaps", str(tmp_path / "hm")])
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["metrics"]) == {f"q{k}" for k in range(1, 9)}
    assert any((tmp_path / "hm").glob("*_q3.png"))


def test_above_base_magnification_is_input_error(tmp_path, synth_slide):
    toml = tmp_path / "c.toml"
    toml.write_text('[magnifications]\nq2 = 40\n')
    assert main(["evaluate", str(synth_slide.path), "--config", str(toml)]) == 2


def test_batch_empty_list(tmp_path, capsys):
    (tmp_path / "list.txt").write_text("# nothing\n")
    assert main(["batch", str(tmp_path / "list.txt")]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 1 and out.startswith("slide_id,q1")


def test_calibrate_grid_from_pngs(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for k in range(30):
        g = np.clip(np.floor(236 + rng.normal(0, 2, (64, 64)) + 0.5), 0, 255).astype(np.uint8)
        write_png(tmp_path / f"p{k:02d}.png", np.repeat(g[..., None], 3, axis=2))
    out = tmp_path / "cal.json"
    assert main(["calibrate-grid", str(tmp_path), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["v_nogrid"] == pytest.approx(4 + 1 / 12, rel=0.05)


def test_calibrate_grid_too_few(tmp_path):
    write_png(tmp_path / "p.png", np.full((8, 8, 3), 236, np.uint8))
    assert main(["calibrate-grid", str(tmp_path)]) == 3


def test_train_score(tmp_path, capsys):
    from wsiqc.score import rubric_dataset

    p = tmp_path / "labels.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"q{k}" for k in range(1, 9)] + ["label"])
        for x, y in rubric_dataset(60, seed=1):
            w.writerow(list(x) + [y])
    assert main(["train-score", str(p), "--out", str(tmp_path / "m.json"), "--rounds", "20"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["rows"] == 60 and summary["rmse"] < 1.0


def test_synth_ladder_then_train_focus(tmp_path, capsys):
    d = tmp_path / "ladder"
    assert main(["synth-ladder", str(d), "--scenes", "2"]) == 0
    assert main(["train-focus", str(d), "--epochs", "5", "--out", str(tmp_path / "w.json")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[-1])["windows"] == 24


def test_synth_command(tmp_path, capsys):
    spec = {"width": 1024, "height": 1024, "seed": 2, "noise_sigma": 0}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", str(tmp_path / "spec.json"), str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "truth.json").is_file()
    assert (tmp_path / "out" / "synth_0002" / "manifest.json").is_file()
