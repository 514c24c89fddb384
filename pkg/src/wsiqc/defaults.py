"""Rebuild the shipped defaults deterministically.

All three are fitted to synthetic data only and are not clinically validated:

* ``focus_default.json``: sharpness network trained on the blur ladder;
* ``score_default.json``: tree ensemble fitted to the rubric labeler;
* ``grid_default.json``: no-grid background variance of synthetic 4x patches.
"""
from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np

from .focus import TrainConfig, train_focus
from .grid import calibrate_grid
from .imaging import PATCH, box_resample
from .score import GbdtConfig, rubric_dataset, train_gbdt
from .synth import blur_ladder

FOCUS_SCENES = 80
SCORE_ROWS = 1000


def build_focus(seed: int = 0, log=None):
    windows, _, targets = blur_ladder(FOCUS_SCENES, seed=seed)
    return train_focus(list(zip(windows, targets)), TrainConfig(seed=seed), log=log)


def build_score(seed: int = 0):
    model = train_gbdt(rubric_dataset(SCORE_ROWS, seed), GbdtConfig())
    model.meta = {"labels": "synthetic rubric", "clinical": False, "rows": SCORE_ROWS, "seed": seed}
    return model


def build_grid(seed: int = 0, background: int = 236, noise_sigma: float = 3.0, n: int = 40, downsample: int = 5):
    """Variance of flat background after rounding and box downsampling (5x: 20x -> 4x)."""
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(n):
        base = np.floor(background + rng.normal(0, noise_sigma, (PATCH * downsample, PATCH * downsample)) + 0.5)
        base = np.clip(base, 0, 255).astype(np.uint8)
        patches.append(box_resample(np.repeat(base[..., None], 3, axis=2), Fraction(1, downsample)))
    return calibrate_grid(patches)


def write_defaults(out_dir, log=None) -> None:
    out = Path(out_dir)
    build_focus(log=log).save(out / "focus_default.json")
    build_score().save(out / "score_default.json")
    build_grid().save(out / "grid_default.json")


if __name__ == "__main__":
    write_defaults(Path(__file__).parent / "data", log=print)
