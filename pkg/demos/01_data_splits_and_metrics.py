"""Walk through the data side: the reference split, class weights and metrics.

Run: python demos/01_data_splits_and_metrics.py
"""
import numpy as np

from ucssl.datasets import class_weights, manifest_from_counts, reference_counts, stratified_split
from ucssl.evaluation import confusion, metrics

# The public colonoscopy corpus has 11276 images over four Mayo scores.
ref = reference_counts()
print("per-class totals:", ref["total"])

# A stratified 50/30/20 split reproduces the published per-class counts exactly.
names = ("pretrain", "finetune", "test")
manifest = manifest_from_counts(ref["total"])
plan = stratified_split(manifest, (0.5, 0.3, 0.2), seed=0, names=names)
for name, row in plan.counts(manifest).items():
    print(f"{name:>9}: {dict(row)}  (reference {ref[name]})")

# Inverse-frequency weights give every class the same total mass in the loss.
w = class_weights(ref["total"])
print("class weights:", {c: round(v, 4) for c, v in w.weights.items()})

# Macro metrics on a small hand-made prediction set; F1 is the harmonic
# mean of macro precision and macro recall.
rng = np.random.default_rng(0)
labels = rng.integers(0, 4, 40)
preds = np.where(rng.random(40) < 0.7, labels, rng.integers(0, 4, 40))
report = metrics(confusion(preds, labels))
print("confusion (rows = true class):")
print(report.confusion.counts)
print({k: v for k, v in report.rounded().items()})
