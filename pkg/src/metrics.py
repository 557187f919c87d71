"""Classification metrics for the three empathy levels."""

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from src.errors import PreconditionError

NUM_CLASSES = 3


def _check(pred: Sequence[int], truth: Sequence[int]) -> None:
    if len(pred) != len(truth):
        raise PreconditionError(f"length mismatch: {len(pred)} predictions, {len(truth)} labels")
    if len(truth) == 0:
        raise PreconditionError("metrics need at least one sample")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_labels(
        cls, pred: Sequence[int], truth: Sequence[int], num_classes: int = NUM_CLASSES
    ) -> "ConfusionMatrix":
        _check(pred, truth)
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def precision(self) -> np.ndarray:
        predicted = self.counts.sum(axis=0)
        tp = np.diag(self.counts).astype(np.float64)
        return np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)

    def recall(self) -> np.ndarray:
        actual = self.support()
        tp = np.diag(self.counts).astype(np.float64)
        return np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)

    def f1(self) -> np.ndarray:
        p, r = self.precision(), self.recall()
        denom = p + r
        return np.divide(2 * p * r, denom, out=np.zeros_like(denom), where=denom > 0)

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


def accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Fraction of exact matches."""
    _check(pred, truth)
    return sum(int(p == t) for p, t in zip(pred, truth)) / len(truth)


def weighted_f1(pred: Sequence[int], truth: Sequence[int], num_classes: int = NUM_CLASSES) -> float:
    """Per-class F1 averaged with true-class support weights.

    A class with no predictions has precision 0; with no true samples, recall 0
    and weight 0; F1 is 0 when precision + recall is 0.
    """
    cm = ConfusionMatrix.from_labels(pred, truth, num_classes)
    return float(np.dot(cm.f1(), cm.support()) / cm.total)


def macro_f1(pred: Sequence[int], truth: Sequence[int], num_classes: int = NUM_CLASSES) -> float:
    """Unweighted mean F1 over classes present in truth or predictions."""
    cm = ConfusionMatrix.from_labels(pred, truth, num_classes)
    present = (cm.support() > 0) | (cm.counts.sum(axis=0) > 0)
    return float(cm.f1()[present].mean())


def per_class(cm: ConfusionMatrix) -> Dict[str, List[float]]:
    return {
        "precision": cm.precision().tolist(),
        "recall": cm.recall().tolist(),
        "f1": cm.f1().tolist(),
        "support": cm.support().tolist(),
    }
