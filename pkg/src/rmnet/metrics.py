"""Classification and retrieval metrics.

Per-class precision, sensitivity and specificity come from a one-vs-rest reduction of
the confusion matrix; averages are unweighted over classes.  Retrieval scores
(mAP@10, mRR@10) average within each query class first, then over classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

TOP = 10
KAPPA_GOOD, KAPPA_MODERATE = 0.75, 0.40


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """counts[true, predicted]."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        m = self.counts.shape
        if len(m) != 2 or m[0] != m[1]:
            raise MetricError(f"confusion matrix must be square, got {m}")
        if (self.counts < 0).any():
            raise MetricError("confusion matrix counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(cm)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class ``c``."""
        cm = self.counts
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        return tp, fp, fn, self.n - tp - fp - fn


def _ratio(num: int, den: int) -> tuple[Fraction, bool]:
    return (Fraction(0), True) if den == 0 else (Fraction(num, den), False)


@dataclass
class ClassReport:
    precision: list[float]
    sensitivity: list[float]
    specificity: list[float]
    average_precision: float
    average_sensitivity: float
    average_specificity: float
    undefined: dict[str, list[int]] = field(default_factory=dict)


def per_class_metrics(cm: ConfusionMatrix) -> ClassReport:
    """Zero denominators yield 0 and are listed in ``undefined``."""
    if cm.n == 0:
        raise MetricError("confusion matrix is empty")
    cols = {"precision": [], "sensitivity": [], "specificity": []}
    undefined = {k: [] for k in cols}
    for c in range(cm.num_classes):
        tp, fp, fn, tn = cm.one_vs_rest(c)
        for key, (num, den) in (("precision", (tp, tp + fp)), ("sensitivity", (tp, tp + fn)),
                                ("specificity", (tn, fp + tn))):
            val, bad = _ratio(num, den)
            cols[key].append(val)
            if bad:
                undefined[key].append(c)
    m = cm.num_classes
    return ClassReport(
        precision=[float(v) for v in cols["precision"]],
        sensitivity=[float(v) for v in cols["sensitivity"]],
        specificity=[float(v) for v in cols["specificity"]],
        average_precision=float(sum(cols["precision"]) / m),
        average_sensitivity=float(sum(cols["sensitivity"]) / m),
        average_specificity=float(sum(cols["specificity"]) / m),
        undefined={k: v for k, v in undefined.items() if v},
    )


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa (p0 - pe) / (1 - pe), evaluated in integers until the final division."""
    n = cm.n
    if n == 0:
        raise MetricError("confusion matrix is empty")
    a = cm.counts.sum(axis=1)
    b = cm.counts.sum(axis=0)
    chance = int(sum(int(x) * int(y) for x, y in zip(a, b)))
    agree = int(np.trace(cm.counts))
    den = n * n - chance
    if den == 0:
        raise MetricError("kappa undefined: chance agreement equals 1")
    return float(Fraction(n * agree - chance, den))


def kappa_components(cm: ConfusionMatrix) -> tuple[float, float]:
    n = cm.n
    a, b = cm.counts.sum(axis=1), cm.counts.sum(axis=0)
    return float(Fraction(int(np.trace(cm.counts)), n)), float(Fraction(int((a * b).sum()), n * n))


def kappa_band(k: float) -> str:
    if k > KAPPA_GOOD:
        return "good"
    if k >= KAPPA_MODERATE:
        return "moderate"
    return "poor"


@dataclass
class RankedRetrieval:
    """Top-10 retrieved labels per query, with the query labels."""

    query_labels: np.ndarray
    retrieved: np.ndarray  # (Q, 10)
    num_classes: int | None = None

    def __post_init__(self):
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        self.retrieved = np.asarray(self.retrieved, dtype=np.int64)
        if self.retrieved.ndim != 2 or self.retrieved.shape[1] != TOP:
            raise MetricError(f"every query needs exactly {TOP} results, got shape {self.retrieved.shape}")
        if len(self.query_labels) != len(self.retrieved):
            raise MetricError("one result list per query required")
        if len(self.query_labels) == 0:
            raise MetricError("no queries")

    def classes(self) -> list[int]:
        present = sorted(set(self.query_labels.tolist()))
        if self.num_classes is not None:
            missing = sorted(set(range(self.num_classes)) - set(present))
            if missing:
                raise MetricError(f"no queries for classes {missing}")
            return list(range(self.num_classes))
        return present


def _class_balanced(rr: RankedRetrieval, per_query: np.ndarray) -> float:
    per_class = [per_query[rr.query_labels == c].mean() for c in rr.classes()]
    return float(np.mean(per_class))


def map_at_10(rr: RankedRetrieval) -> float:
    hits = rr.retrieved == rr.query_labels[:, None]
    return _class_balanced(rr, hits.sum(axis=1) / TOP)


def mrr_at_10(rr: RankedRetrieval) -> float:
    """Reciprocal rank of the first correct result; 0 when none of the 10 is correct."""
    hits = rr.retrieved == rr.query_labels[:, None]
    first = hits.argmax(axis=1)
    recip = np.where(hits.any(axis=1), 1.0 / (first + 1), 0.0)
    return _class_balanced(rr, recip)
