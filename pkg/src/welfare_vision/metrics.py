"""Metric primitives for the consumption-prediction experiments.

All classification metrics treat label 1 (extreme poverty) as the positive
class. Undefined metrics raise :class:`UndefinedMetricError` instead of
returning a sentinel zero, so a degenerate validation fold can never win
model selection silently.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence


class UndefinedMetricError(ValueError):
    """Raised when a metric's denominator is empty for the given inputs."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 confusion counts. Positive class = extreme poverty (label 1)."""

    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self) -> None:
        for name in ("tn", "fp", "fn", "tp"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def as_dict(self) -> dict[str, int]:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}

    def normalized_rows(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Rows divided by their row sums: ((tn, fp), (fn, tp)) as rates."""
        negatives = self.tn + self.fp
        positives = self.fn + self.tp
        if negatives == 0 or positives == 0:
            raise UndefinedMetricError("cannot normalize a confusion matrix with an empty row")
        return (
            (self.tn / negatives, self.fp / negatives),
            (self.fn / positives, self.tp / positives),
        )


@dataclass(frozen=True)
class RegressionPairs:
    """Aligned (prediction, target) vectors; both finite, equal nonzero length."""

    predictions: tuple[float, ...]
    targets: tuple[float, ...]

    def __init__(self, predictions: Sequence[float], targets: Sequence[float]) -> None:
        preds = tuple(float(p) for p in predictions)
        targs = tuple(float(t) for t in targets)
        if len(preds) == 0:
            raise ValueError("regression pairs must be non-empty")
        if len(preds) != len(targs):
            raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(targs)} targets")
        for value in preds + targs:
            if not math.isfinite(value):
                raise ValueError(f"non-finite value in regression pairs: {value!r}")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "targets", targs)

    def __len__(self) -> int:
        return len(self.predictions)


def rmse(pairs: RegressionPairs) -> float:
    """Root mean squared error between predictions and targets."""
    squared = math.fsum((p - t) ** 2 for p, t in zip(pairs.predictions, pairs.targets))
    return math.sqrt(squared / len(pairs))


def r_squared(pairs: RegressionPairs) -> float:
    """Coefficient of determination: 1 - SS_res / SS_tot."""
    mean_target = math.fsum(pairs.targets) / len(pairs)
    ss_tot = math.fsum((t - mean_target) ** 2 for t in pairs.targets)
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared is undefined for constant targets (zero variance)")
    ss_res = math.fsum((t - p) ** 2 for p, t in zip(pairs.predictions, pairs.targets))
    return 1.0 - ss_res / ss_tot


def confusion(labels: Sequence[int], preds: Sequence[int]) -> ConfusionMatrix:
    """Count (label, prediction) cells for binary vectors."""
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} predictions")
    if len(labels) == 0:
        raise ValueError("cannot build a confusion matrix from empty inputs")
    tn = fp = fn = tp = 0
    for label, pred in zip(labels, preds):
        if label not in (0, 1) or pred not in (0, 1):
            raise ValueError(f"labels and predictions must be 0 or 1, got ({label!r}, {pred!r})")
        if label == 1:
            if pred == 1:
                tp += 1
            else:
                fn += 1
        else:
            if pred == 1:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy is undefined for an empty confusion matrix")
    return (cm.tn + cm.tp) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    if denom == 0:
        raise UndefinedMetricError("precision is undefined: no positive predictions (tp+fp=0)")
    return cm.tp / denom


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    if denom == 0:
        raise UndefinedMetricError("recall is undefined: no positive labels (tp+fn=0)")
    return cm.tp / denom


def fbeta(precision_value: float, recall_value: float, beta: float = 0.8) -> float:
    """F-beta score (1+b^2)PR / (b^2 P + R). beta < 1 weights precision above recall."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    for name, value in (("precision", precision_value), ("recall", recall_value)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    if precision_value == 0.0 and recall_value == 0.0:
        raise UndefinedMetricError("fbeta is undefined when precision and recall are both zero")
    b2 = beta * beta
    return (1.0 + b2) * precision_value * recall_value / (b2 * precision_value + recall_value)


@dataclass
class MetricsReport:
    """Evaluation summary for one trained model on one validation set.

    Serialized as JSON with the raw (prediction, target) pairs in a sidecar
    CSV referenced by ``pairs_path``.
    """

    task: str
    n_valid: int
    metrics: dict[str, float | None] = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None
    pairs: RegressionPairs | None = None
    pairs_path: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "n_valid": self.n_valid,
            "metrics": dict(self.metrics),
            "confusion": self.confusion.as_dict() if self.confusion else None,
            "pairs_path": self.pairs_path,
        }

    def save(self, path: Path | str) -> Path:
        """Write the report JSON; pairs, when present, go to ``pairs_path``."""
        path = Path(path)
        if self.pairs is not None:
            pairs_path = Path(self.pairs_path) if self.pairs_path else path.with_name("pairs.csv")
            if not pairs_path.is_absolute():
                pairs_path = path.parent / pairs_path
            with open(pairs_path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(["prediction", "target"])
                for pred, targ in zip(self.pairs.predictions, self.pairs.targets):
                    writer.writerow([repr(pred), repr(targ)])
            self.pairs_path = pairs_path.name if pairs_path.parent == path.parent else str(pairs_path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        cm = ConfusionMatrix(**raw["confusion"]) if raw.get("confusion") else None
        pairs = None
        pairs_path = raw.get("pairs_path")
        if pairs_path:
            resolved = Path(pairs_path)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            if resolved.exists():
                preds, targs = [], []
                with open(resolved, newline="", encoding="utf-8") as handle:
                    for row in csv.DictReader(handle):
                        preds.append(float(row["prediction"]))
                        targs.append(float(row["target"]))
                pairs = RegressionPairs(preds, targs)
        return cls(
            task=raw["task"],
            n_valid=raw["n_valid"],
            metrics=dict(raw.get("metrics", {})),
            confusion=cm,
            pairs=pairs,
            pairs_path=pairs_path,
        )


def classification_summary(cm: ConfusionMatrix, beta: float = 0.8) -> dict[str, float | None]:
    """Accuracy/precision/recall/fbeta from counts; undefined entries become None."""
    summary: dict[str, float | None] = {"accuracy": accuracy(cm)}
    try:
        p = precision(cm)
    except UndefinedMetricError:
        p = None
    try:
        r = recall(cm)
    except UndefinedMetricError:
        r = None
    summary["precision_score"] = p
    summary["recall_score"] = r
    if p is None or r is None or (p == 0.0 and r == 0.0):
        summary["fbeta_score"] = None
    else:
        summary["fbeta_score"] = fbeta(p, r, beta)
    return summary
