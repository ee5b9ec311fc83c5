"""Report rendering: JSON, markdown tables, ROC and size-histogram CSVs, panels."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import LABELS
from .metrics import NOT_DETECTED

SIZE_BIN_WIDTH = 0.05


def dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}%"


def _table_rows(source: str, table: dict, missing_header: str) -> list[str]:
    lines = []
    for i, cls in enumerate(LABELS):
        row = table["rows"][cls]
        lines.append(
            "| {src} | {cls} | {b} | {m} | {acc} | {nd} | {overall} |".format(
                src=source if i == 0 else "",
                cls=cls.capitalize(),
                b=row["benign"],
                m=row["malignant"],
                acc=_pct(table["per_class_accuracy"][cls]),
                nd=row[NOT_DETECTED],
                overall=_pct(table["prediction_accuracy"]) if i == 0 else "",
            )
        )
    return lines


def render_tables(eval_outputs: dict, subject_outputs: Sequence[dict]) -> str:
    lines = ["# Classification tables", "", "## Image-based classification", ""]
    lines.append("| Patches From | Actual Label | Benign | Malignant | Per-class Accuracy | Not Detected | Prediction Accuracy |")
    lines.append("|---|---|---|---|---|---|---|")
    for source, table in sorted(eval_outputs.get("classification", {}).items()):
        lines.extend(_table_rows(source, table, "Not Detected"))
    lines += ["", "## Subject-based classification", ""]
    lines.append("| Patches From | Actual Label | Benign | Malignant | Per-class Accuracy | Wrong Detection & Diagnosis | Diagnosis Accuracy |")
    lines.append("|---|---|---|---|---|---|---|")
    for subj in sorted(subject_outputs, key=lambda s: s.get("source", "")):
        lines.extend(_table_rows(subj.get("source", ""), subj["table"], "Wrong Detection & Diagnosis"))
    det = eval_outputs.get("detection")
    seg = eval_outputs.get("segmentation", {}).get("aggregate")
    if det or seg:
        lines += ["", "## Detection and segmentation", ""]
    if det:
        s = det["summary"]
        lines.append(
            f"- lesions: tp={det['counts']['tp']} fp={det['counts']['fp']} fn={det['counts']['fn']}; "
            f"accuracy {_pct(s['accuracy'])}, precision {_pct(s['precision'])}, "
            f"recall {_pct(s['recall'])}, F-score {s['f_score']:.2f}"
        )
    if seg:
        hd = "-" if seg["hausdorff_mean"] is None else f"{seg['hausdorff_mean']:.2f} ± {seg['hausdorff_std']:.2f}"
        lines.append(f"- Dice {seg['dice_mean']:.2f} ± {seg['dice_std']:.2f}; Hausdorff {hd} px")
    return "\n".join(lines) + "\n"


def size_histogram(sizes: dict[str, Sequence[float]], width: float = SIZE_BIN_WIDTH) -> list[dict]:
    """Right-closed bins (k*width, (k+1)*width] over (0, 1]."""
    nbins = int(round(1.0 / width))
    counts = {name: [0] * nbins for name in sizes}
    for name, vals in sizes.items():
        for v in vals:
            if not 0 < v <= 1:
                raise ValueError(f"normalised size {v} outside (0, 1]")
            k = min(max(int(math.ceil(v / width)) - 1, 0), nbins - 1)
            counts[name][k] += 1
    return [
        {"bin_lo": round(k * width, 10), "bin_hi": round((k + 1) * width, 10), **{n: counts[n][k] for n in sizes}}
        for k in range(nbins)
    ]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def render_panel(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """image | ground truth | prediction, side by side (8-bit)."""
    img = image.astype(np.float64)
    if img.max() > 255:
        img = img / img.max() * 255.0
    gap = np.full((image.shape[0], 2), 128.0)
    row = np.hstack([img, gap, truth.astype(np.float64) * 255, gap, pred.astype(np.float64) * 255])
    return np.clip(np.rint(row), 0, 255).astype(np.uint8)


def emit_report(eval_outputs: dict, subject_outputs: Sequence[dict], out_dir, panels: Sequence = ()) -> list[Path]:
    """Write report.json, tables.md, roc.csv, size_hist.csv and panels/*.png.

    ``panels`` holds (name, image, truth_mask, predicted_mask) tuples.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    report = {"evaluation": eval_outputs, "subjects": {s.get("source", str(i)): s for i, s in enumerate(subject_outputs)}}
    dump_json(report, out / "report.json")
    written.append(out / "report.json")

    (out / "tables.md").write_text(render_tables(eval_outputs, subject_outputs), encoding="utf-8")
    written.append(out / "tables.md")

    roc_rows = []
    for source, roc in sorted(eval_outputs.get("roc", {}).items()):
        for thr, fpr, tpr in roc.get("points", []):
            roc_rows.append([source, repr(float(thr)), repr(float(fpr)), repr(float(tpr))])
    _write_csv(out / "roc.csv", ["source", "threshold", "fpr", "tpr"], roc_rows)
    written.append(out / "roc.csv")

    sizes = eval_outputs.get("lesion_sizes", {"annotated": [], "predicted": []})
    hist = size_histogram(sizes)
    names = sorted(sizes)
    _write_csv(out / "size_hist.csv", ["bin_lo", "bin_hi", *names], [[h["bin_lo"], h["bin_hi"], *(h[n] for n in names)] for h in hist])
    written.append(out / "size_hist.csv")

    if panels:
        (out / "panels").mkdir(exist_ok=True)
        for name, image, truth, pred in panels:
            p = out / "panels" / f"{name}.png"
            Image.fromarray(render_panel(np.asarray(image), np.asarray(truth), np.asarray(pred))).save(p)
            written.append(p)
    return written
