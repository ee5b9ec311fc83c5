"""Segmentation, detection and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import directed_hausdorff
from scipy.stats import rankdata

from .data import LABELS, BinaryMask

NOT_DETECTED = "not_detected"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SegScores:
    dice: float
    hausdorff: Optional[float]  # None when either mask is empty


@dataclass(frozen=True)
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _bits(m) -> np.ndarray:
    if isinstance(m, BinaryMask):
        return m.bits
    if hasattr(m, "mask"):
        return m.mask.bits
    return np.asarray(m, dtype=bool)


def dice(a, b) -> float:
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise MetricError("undefined Dice: both masks are empty")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _boundary(bits: np.ndarray) -> np.ndarray:
    return bits & ~ndimage.binary_erosion(bits, structure=np.ones((3, 3), bool), border_value=0)


def hausdorff(a, b, boundary: bool = False, spacing: Optional[tuple[float, float]] = None) -> float:
    """Symmetric Hausdorff distance between true-pixel sets, in pixels.

    ``spacing`` = (row, column) pixel size converts the result to physical units.
    """
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise MetricError("Hausdorff distance needs two non-empty masks")
    if boundary:
        a, b = _boundary(a), _boundary(b)
    pa = np.argwhere(a).astype(np.float64)
    pb = np.argwhere(b).astype(np.float64)
    if spacing is not None:
        pa *= spacing
        pb *= spacing
    return float(max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0]))


def seg_scores(pred, truth) -> SegScores:
    """Dice (0 when the prediction is empty) plus Hausdorff when defined."""
    p, t = _bits(pred), _bits(truth)
    if not p.any() and not t.any():
        return SegScores(1.0, 0.0)
    d = dice(p, t)
    hd = hausdorff(p, t) if p.any() and t.any() else None
    return SegScores(d, hd)


def match_detections(predicted: Sequence, truths: Sequence, dsc_threshold: float = 0.5):
    """One-to-one matching of predictions to truths over pairs with Dice >= threshold.

    Maximises the number of matched pairs, then their summed Dice. Plain
    greedy-by-Dice agrees whenever regions are disjoint, but can undercount
    when one prediction overlaps two truths.
    Returns (DetectionCounts, [(pred_idx, truth_idx, dice), ...]) for the
    accepted pairs, sorted by descending Dice.
    """
    n, m = len(predicted), len(truths)
    scores = np.full((n, m), -1.0)
    for i, p in enumerate(predicted):
        pb = _bits(p)
        for j, t in enumerate(truths):
            tb = _bits(t)
            if pb.any() or tb.any():
                scores[i, j] = dice(pb, tb)
    eligible = scores >= dsc_threshold
    accepted = []
    if eligible.any():
        # each eligible pair is worth more than any Dice total, so count dominates
        weight = np.where(eligible, (n + m + 1) + scores, 0.0)
        rows, cols = linear_sum_assignment(weight, maximize=True)
        accepted = [(int(i), int(j), float(scores[i, j])) for i, j in zip(rows, cols) if eligible[i, j]]
        accepted.sort(key=lambda x: (-x[2], x[0], x[1]))
    tp = len(accepted)
    return DetectionCounts(tp, n - tp, m - tp), accepted


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def detection_summary(counts: DetectionCounts) -> dict:
    """Accuracy is tp / (tp + fp + fn): lesion-level detection has no true negatives."""
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    return {
        "accuracy": ratio(tp, tp + fp + fn, "accuracy"),
        "precision": precision,
        "recall": recall,
        "f_score": f_score(precision, recall),
        "undefined": undefined,
    }


@dataclass
class ConfusionTable:
    """Rows are actual classes; columns predicted benign/malignant plus not detected."""

    rows: dict = field(default_factory=lambda: {c: {"benign": 0, "malignant": 0, NOT_DETECTED: 0} for c in LABELS})

    @classmethod
    def from_counts(cls, benign: Sequence[int], malignant: Sequence[int]) -> "ConfusionTable":
        t = cls()
        for cls_name, counts in (("benign", benign), ("malignant", malignant)):
            counts = list(counts) + [0] * (3 - len(counts))
            for col, n in zip(("benign", "malignant", NOT_DETECTED), counts):
                if n < 0:
                    raise MetricError("counts must be non-negative")
                t.rows[cls_name][col] = int(n)
        return t

    def add(self, actual: str, predicted: str) -> None:
        if actual not in LABELS:
            raise MetricError(f"unknown actual label {actual!r}")
        if predicted not in ("benign", "malignant", NOT_DETECTED):
            raise MetricError(f"unknown predicted label {predicted!r}")
        self.rows[actual][predicted] += 1

    def class_total(self, actual: str) -> int:
        return sum(self.rows[actual].values())

    @property
    def total(self) -> int:
        return sum(self.class_total(c) for c in LABELS)

    @property
    def correct(self) -> int:
        return sum(self.rows[c][c] for c in LABELS)

    def per_class_accuracy(self, actual: str) -> Optional[float]:
        row = self.rows[actual]
        classified = row["benign"] + row["malignant"]
        return row[actual] / classified if classified else None

    @property
    def prediction_accuracy(self) -> Optional[float]:
        return self.correct / self.total if self.total else None

    def as_dict(self) -> dict:
        return {
            "rows": {c: dict(self.rows[c]) for c in LABELS},
            "per_class_accuracy": {c: self.per_class_accuracy(c) for c in LABELS},
            "prediction_accuracy": self.prediction_accuracy,
            "total": self.total,
        }


def confusion_table(predictions: Iterable[tuple[str, str]]) -> ConfusionTable:
    table = ConfusionTable()
    n = 0
    for actual, predicted in predictions:
        table.add(actual, predicted)
        n += 1
    if n == 0:
        raise MetricError("no predictions")
    return table


def _split_scores(scores):
    s = np.array([float(p) for p, _ in scores], dtype=np.float64)
    y = np.array([1 if lab in ("malignant", 1, True) else 0 for _, lab in scores])
    if y.sum() == 0 or y.sum() == len(y):
        raise MetricError("ROC AUC needs at least one sample of each class")
    return s, y


def roc_auc(scores: Sequence[tuple[float, object]]) -> float:
    """Mann-Whitney estimate; ties count one half."""
    s, y = _split_scores(scores)
    ranks = rankdata(s)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores: Sequence[tuple[float, object]]) -> list[tuple[float, float, float]]:
    """(threshold, false positive rate, true positive rate), thresholds descending."""
    from sklearn.metrics import roc_curve as _sk_roc

    s, y = _split_scores(scores)
    fpr, tpr, thr = _sk_roc(y, s, drop_intermediate=False)
    return [(float(t), float(f), float(p)) for t, f, p in zip(thr, fpr, tpr)]


def seg_aggregate(per_image: Sequence[SegScores]) -> dict:
    """Mean and population standard deviation of Dice and Hausdorff."""
    if not per_image:
        raise MetricError("no scores to aggregate")
    d = np.array([s.dice for s in per_image], dtype=np.float64)
    h = np.array([s.hausdorff for s in per_image if s.hausdorff is not None], dtype=np.float64)
    out = {"dice_mean": float(d.mean()), "dice_std": float(d.std()), "n": len(per_image)}
    if len(h):
        out.update(hausdorff_mean=float(h.mean()), hausdorff_std=float(h.std()), n_hausdorff=len(h))
    else:
        out.update(hausdorff_mean=None, hausdorff_std=None, n_hausdorff=0)
    return out
