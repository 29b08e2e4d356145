"""Confusion matrices, macro metrics and table rendering.

F1 is the harmonic mean of *macro* precision and *macro* recall, not the mean
of per-class F1 scores. All reported values are percentages.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from ucssl import NUM_CLASSES
from ucssl.errors import ValidationError

SUPERVISED_ORDER = ("Inception-V4", "ResNet-50", "VGG-19")
SSL_ORDER = ("BYOL", "MoCo", "SwAV", "SparK")
METHOD_ORDER = SUPERVISED_ORDER + ("Supervised",) + SSL_ORDER
CSV_HEADER = ("method", "fraction", "accuracy", "precision", "recall", "f1")
LAYOUTS = ("table2", "table4", "table5", "table6")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValidationError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValidationError("confusion matrix of an empty sample is undefined")
    for name, a in (("prediction", preds), ("label", labels)):
        if a.min() < 0 or a.max() >= n_classes:
            raise ValidationError(f"{name} out of range 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    f1: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    confusion: ConfusionMatrix
    degenerate_classes: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.degenerate_classes)

    def rounded(self) -> dict[str, float]:
        return {k: round1(getattr(self, k)) for k in ("accuracy", "macro_precision", "macro_recall", "f1")}

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.f1,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
            "confusion": self.confusion.counts.tolist(),
            "degenerate_classes": list(self.degenerate_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            accuracy=d["accuracy"],
            macro_precision=d["precision"],
            macro_recall=d["recall"],
            f1=d["f1"],
            per_class_precision=list(d["per_class_precision"]),
            per_class_recall=list(d["per_class_recall"]),
            confusion=ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64)),
            degenerate_classes=list(d.get("degenerate_classes", [])),
        )


def harmonic_f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, macro precision/recall and harmonic-mean F1 (percent).

    A class with no predicted (or no true) samples contributes 0 to the macro
    precision (or recall) and is listed in ``degenerate_classes``.
    """
    c = cm.counts.astype(np.float64)
    n = c.sum()
    if n <= 0:
        raise ValidationError("metrics need at least one sample")
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    degenerate = sorted(set(np.flatnonzero(predicted == 0).tolist()) | set(np.flatnonzero(actual == 0).tolist()))
    p = 100 * precision.mean()
    r = 100 * recall.mean()
    return MetricsReport(
        accuracy=100 * tp.sum() / n,
        macro_precision=p,
        macro_recall=r,
        f1=harmonic_f1(p, r),
        per_class_precision=(100 * precision).tolist(),
        per_class_recall=(100 * recall).tolist(),
        confusion=cm,
        degenerate_classes=degenerate,
    )


def round1(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def fmt1(x: float) -> str:
    return f"{round1(x):.1f}"


@dataclass(frozen=True)
class ResultRow:
    """One table row; ``group`` is a data fraction or a kind label (table6)."""

    method: str
    fraction: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    group: str = ""


def load_published_tables() -> list[tuple[str, ResultRow]]:
    """Published metric rows as ``(layout, row)`` pairs."""
    text = resources.files("ucssl.data").joinpath("published_tables.csv").read_text(encoding="utf-8")
    rows = []
    for rec in csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")):
        group = rec["group"]
        fraction = float(group) if group not in ("supervised", "ssl") else 1.0
        rows.append((rec["table"], ResultRow(
            method=rec["method"], fraction=fraction,
            accuracy=float(rec["accuracy"]), precision=float(rec["precision"]),
            recall=float(rec["recall"]), f1=float(rec["f1"]),
            group=group if group in ("supervised", "ssl") else "",
        )))
    return rows


def _method_key(name: str):
    return (METHOD_ORDER.index(name), "") if name in METHOD_ORDER else (len(METHOD_ORDER), name)


def _as_row(r) -> ResultRow:
    if isinstance(r, ResultRow):
        return r
    # RunResult-like objects expose to_row()
    return r.to_row()


def _group_title(layout: str, key) -> str:
    if layout == "table6":
        return {"supervised": "Supervised Learning Models", "ssl": "Pre-trained Self Supervised Learning Models"}[key]
    pct = f"{round(100 * key):d}%"
    if layout == "table2":
        return f"training with {pct} data from Train dataset"
    return f"finetuning with {pct} data from Fine-tune dataset"


def render_tables(results: Iterable, layout: str) -> tuple[str, str]:
    """Render rows in the published layout; returns ``(text, csv)``.

    Rows are grouped by descending data fraction (or supervised-then-SSL for
    ``table6``) and ordered within a group by the canonical method order.
    """
    if layout not in LAYOUTS:
        raise ValidationError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    rows = [_as_row(r) for r in results]
    if layout == "table6":
        def group_of(r):
            return r.group or ("ssl" if r.method in SSL_ORDER else "supervised")
        keys = [k for k in ("supervised", "ssl") if any(group_of(r) == k for r in rows)]
    else:
        def group_of(r):
            return r.fraction
        keys = sorted({r.fraction for r in rows}, reverse=True)

    text_lines, csv_buf = [], io.StringIO()
    w = csv.writer(csv_buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    header = "Method\tAccuracy\tPrecision\tRecall\tF1-Score"
    if not keys:
        text_lines.append(header)
    for key in keys:
        text_lines.append(_group_title(layout, key))
        text_lines.append(header)
        for r in sorted((r for r in rows if group_of(r) == key), key=lambda r: _method_key(r.method)):
            vals = [fmt1(v) for v in (r.accuracy, r.precision, r.recall, r.f1)]
            text_lines.append("\t".join([r.method, *vals]))
            w.writerow([r.method, f"{r.fraction:g}", *vals])
    return "\n".join(text_lines) + "\n", csv_buf.getvalue()
