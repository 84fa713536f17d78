"""Four-class and collapsed binary reports for a noisy prediction of a synthetic scene."""

import numpy as np

from floodbench.data import SynthConfig, generate_synthetic
from floodbench.metrics import evaluate_maps, normalize_rows

rng = np.random.default_rng(0)
labels = np.stack([s.label for s in generate_synthetic(SynthConfig(scenes=4, size=128), seed=1)])

# corrupt 30% of building pixels to a random class
preds = labels.copy()
flip = (labels > 0) & (rng.random(labels.shape) < 0.3)
preds[flip] = rng.integers(0, 4, int(flip.sum()))

reports = evaluate_maps(labels, preds)
four, binary = reports["four_class"], reports["binary"]
print(f"four-class  OA {four.oa:.4f}  macro-F1 {four.macro_f1:.4f}  kappa {four.kappa:.4f}")
print(f"binary      OA {binary.oa:.4f}  F1(damaged) {binary.f1[1]:.4f}  kappa {binary.kappa:.4f}")

norm, empty = normalize_rows(four.matrix)
print("row-normalized confusion (rows = ground truth):")
for name, row in zip(("no-damage", "minor", "major", "destroyed"), norm):
    print(f"  {name:<10} " + "  ".join(f"{v:.3f}" for v in row))
