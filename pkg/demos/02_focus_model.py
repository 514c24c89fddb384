"""Train the sharpness network on a synthetic defocus ladder and check how well
it ranks unseen windows by blur level.

    python demos/02_focus_model.py
"""
import time

import numpy as np

from wsiqc.focus import TrainConfig, predict_batch, train_focus
from wsiqc.stats import plcc, srcc
from wsiqc.synth import blur_ladder

train_x, _, train_t = blur_ladder(80, seed=0)
test_x, test_levels, test_t = blur_ladder(60, seed=500)
print(f"{len(train_x)} training windows, {len(test_x)} held-out windows, 12 defocus levels")

t0 = time.time()
w = train_focus(list(zip(train_x, train_t)), TrainConfig(), log=print)
print(f"trained in {time.time() - t0:.0f}s")

pred = predict_batch(test_x, w)
print(f"held-out SRCC vs sharpness {srcc(pred, test_t):.4f}, PLCC {plcc(pred, test_t):.4f}")
print("mean prediction per level (target falls 12 -> 0):")
for k in range(12):
    sel = test_levels == k
    print(f"  level {k:2d}  target {test_t[sel][0]:5.2f}  predicted {pred[sel].mean():6.2f} +- {pred[sel].std():.2f}")
