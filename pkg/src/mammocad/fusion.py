"""Subject-level fusion of per-view predictions, malignant first."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .metrics import NOT_DETECTED, ConfusionTable, confusion_table

_ALLOWED = ("benign", "malignant", NOT_DETECTED)


@dataclass(frozen=True)
class SubjectDiagnosis:
    case_id: str
    view_predictions: tuple[tuple[str, str], ...]
    actual: str
    fused: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "view_predictions", tuple(tuple(v) for v in self.view_predictions))
        if not self.fused:
            object.__setattr__(self, "fused", fuse_views(self.view_predictions))


def fuse_views(preds: Iterable) -> str:
    """Malignant if any view says so; not detected only if every view is.

    Items may be bare labels or (view, label) pairs.
    """
    labels = [p[1] if isinstance(p, (tuple, list)) else p for p in preds]
    if not labels:
        raise ValueError("no view predictions to fuse")
    for lab in labels:
        if lab not in _ALLOWED:
            raise ValueError(f"unknown prediction {lab!r}")
    if "malignant" in labels:
        return "malignant"
    if all(lab == NOT_DETECTED for lab in labels):
        return NOT_DETECTED
    return "benign"


def subject_report(diagnoses: Sequence[SubjectDiagnosis]) -> tuple[ConfusionTable, float]:
    """Confusion table over fused labels; undetected subjects count as wrong."""
    if not diagnoses:
        raise ValueError("no subjects")
    table = confusion_table((d.actual, d.fused) for d in diagnoses)
    return table, table.correct / len(diagnoses)


def subject_report_dict(diagnoses: Sequence[SubjectDiagnosis], source: str = "") -> dict:
    table, acc = subject_report(diagnoses)
    return {
        "source": source,
        "table": table.as_dict(),
        "diagnosis_accuracy": acc,
        "n_subjects": len(diagnoses),
        "subjects": [
            {
                "case_id": d.case_id,
                "actual": d.actual,
                "fused": d.fused,
                "views": [list(v) for v in d.view_predictions],
            }
            for d in diagnoses
        ],
    }
