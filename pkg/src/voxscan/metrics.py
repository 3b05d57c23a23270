"""Confusion matrix, one-vs-rest metrics, and report serialization.

Class order is AD, MCI, CN everywhere. Zero denominators yield 0.0 (not NaN)
for precision, recall, and F1, so reports are total and comparable.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .volumes import ClassLabel

_K = len(ClassLabel)


@dataclasses.dataclass(frozen=True)
class ConfusionMatrix:
    """counts[true][pred], 3x3 non-negative integers."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (_K, _K):
            raise ValidationError(f"confusion matrix must be {_K}x{_K}, got "
                                  f"{arr.shape}")
        if (arr < 0).any():
            raise ValidationError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, label: ClassLabel) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) treating `label` as the positive class."""
        i = int(label)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


def confusion(predictions: Sequence[ClassLabel],
              truths: Sequence[ClassLabel]) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ValidationError(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        raise ValidationError("cannot build a confusion matrix from no samples")
    counts = np.zeros((_K, _K), dtype=np.int64)
    for pred, true in zip(predictions, truths):
        counts[int(ClassLabel(true)), int(ClassLabel(pred))] += 1
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValidationError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def precision_recall(cm: ConfusionMatrix, label: ClassLabel) -> tuple[float, float]:
    tp, fp, fn, _ = cm.one_vs_rest(label)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclasses.dataclass(frozen=True)
class ClassMetrics:
    per_class: tuple[tuple[ClassLabel, float, float, float], ...]  # label, P, R, F1
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    rows = []
    for label in ClassLabel:
        p, r = precision_recall(cm, label)
        rows.append((label, p, r, f1(p, r)))
    return ClassMetrics(
        per_class=tuple(rows),
        accuracy=accuracy(cm),
        macro_precision=sum(r[1] for r in rows) / _K,
        macro_recall=sum(r[2] for r in rows) / _K,
        macro_f1=sum(r[3] for r in rows) / _K,
    )


@dataclasses.dataclass(frozen=True)
class EvalReport:
    dataset_id: str
    cm: ConfusionMatrix
    metrics: ClassMetrics
    checkpoint_id: str = ""
    timestamp: str = ""


def report_to_json(r: EvalReport) -> bytes:
    doc = {
        "dataset": r.dataset_id,
        "checkpoint": r.checkpoint_id,
        "timestamp": r.timestamp,
        "confusion": r.cm.counts.tolist(),
        "per_class": [
            {"label": label.name, "precision": p, "recall": rec, "f1": f}
            for label, p, rec, f in r.metrics.per_class
        ],
        "accuracy": r.metrics.accuracy,
        "macro": {
            "precision": r.metrics.macro_precision,
            "recall": r.metrics.macro_recall,
            "f1": r.metrics.macro_f1,
        },
    }
    return (json.dumps(doc, indent=2) + "\n").encode()


def report_from_json(data: bytes) -> EvalReport:
    doc = json.loads(data.decode())
    cm = ConfusionMatrix(np.asarray(doc["confusion"], dtype=np.int64))
    per_class = tuple(
        (ClassLabel.parse(row["label"]), float(row["precision"]),
         float(row["recall"]), float(row["f1"]))
        for row in doc["per_class"]
    )
    metrics = ClassMetrics(
        per_class=per_class,
        accuracy=float(doc["accuracy"]),
        macro_precision=float(doc["macro"]["precision"]),
        macro_recall=float(doc["macro"]["recall"]),
        macro_f1=float(doc["macro"]["f1"]),
    )
    return EvalReport(dataset_id=doc["dataset"], cm=cm, metrics=metrics,
                      checkpoint_id=doc["checkpoint"], timestamp=doc["timestamp"])


def report_to_csv(r: EvalReport) -> bytes:
    """Header plus one row per class and one overall (macro + accuracy) row."""
    lines = ["label,precision,recall,f1,accuracy"]
    for label, p, rec, f in r.metrics.per_class:
        lines.append(f"{label.name},{p!r},{rec!r},{f!r},")
    m = r.metrics
    lines.append(f"overall,{m.macro_precision!r},{m.macro_recall!r},"
                 f"{m.macro_f1!r},{m.accuracy!r}")
    return ("\n".join(lines) + "\n").encode()


def report_emit(r: EvalReport, fmt: str) -> bytes:
    if fmt == "json":
        return report_to_json(r)
    if fmt == "csv":
        return report_to_csv(r)
    raise ValidationError(f"unknown report format {fmt!r}")


def build_report(predictions: Sequence[ClassLabel], truths: Sequence[ClassLabel],
                 dataset_id: str, checkpoint_id: str = "",
                 timestamp: str = "") -> EvalReport:
    cm = confusion(predictions, truths)
    return EvalReport(dataset_id=dataset_id, cm=cm, metrics=class_metrics(cm),
                      checkpoint_id=checkpoint_id, timestamp=timestamp)
