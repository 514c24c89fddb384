"""Fit the score model to rubric labels and walk through the archive / re-prepare /
re-scan decision for a few hand-made metric vectors.

The rubric is a stand-in for expert ratings: 10 times a weighted mean of the
squared metrics. Replace it with real ratings via `wsiqc train-score labels.csv`.

    python demos/03_score_and_decision.py
"""
import numpy as np

from wsiqc.metrics import MetricVector
from wsiqc.score import GbdtConfig, RUBRIC_WEIGHTS, decide, predict_score, rmse, rubric_dataset, train_gbdt

train = rubric_dataset(1000, seed=0)
test = rubric_dataset(300, seed=1)
model = train_gbdt(train, GbdtConfig(rounds=100, max_depth=3, eta=0.1, lam=1.0))
print("rubric weights:", RUBRIC_WEIGHTS)
print(f"RMSE train {rmse(model, train):.3f}, held-out {rmse(model, test):.3f} (0-10 scale)\n")

cases = {
    "clean slide": {},
    "blurred scan": {"q2": 0.25},
    "grid seams + blur": {"q1": 0.4, "q2": 0.3},
    "sparse cells": {"q6": 0.2},
    "sparse, obscured, blurred": {"q2": 0.3, "q6": 0.15, "q8": 0.3},
    "everything wrong": {n: 0.2 for n in RUBRIC_WEIGHTS},
}
for name, vals in cases.items():
    q = MetricVector.from_values(**vals)
    s = predict_score(model, q)
    d = decide(s, q)
    print(f"{name:<28} score {s:5.2f}  {d.action:<20} flagged {d.reasons}")
