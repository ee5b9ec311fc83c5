"""File-level pipeline stages shared by the CLI and the pipeline runner."""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import cadi as cadi_mod
from .cade import CadeModelConfig, CadeTrainConfig, Detector, ProbabilityMap, train_cade
from .checkpoint import Checkpoint
from .data import (
    BoundingBox,
    DatasetManifest,
    GrayImage,
    group_by_case,
    load_manifest,
    read_image,
    read_mask,
    write_image,
)
from .fusion import SubjectDiagnosis, fuse_views, subject_report_dict
from .metrics import (
    NOT_DETECTED,
    DetectionCounts,
    MetricError,
    confusion_table,
    detection_summary,
    match_detections,
    roc_auc,
    roc_curve,
    seg_aggregate,
    seg_scores,
)
from .postprocess import (
    detect_regions,
    double_square_box,
    normalized_lesion_size,
    scale_region,
)
from .preprocess import is_noise_copy, segment_breast
from .report import dump_json, emit_report

log = logging.getLogger(__name__)

REGION_HEADER = ["image_id", "region_idx", "x0", "y0", "w", "h", "area", "mean_prob"]
PREDICTION_HEADER = ["image_id", "region_idx", "p_benign", "p_malignant", "label"]
LABELS_HEADER = ["roi", "image_id", "region_idx", "label", "split"]
_EIGHT = np.ones((3, 3), dtype=bool)


def roi_name(image_id: str, region_idx: int) -> str:
    return f"{image_id}__r{region_idx}.png"


def parse_roi_name(name: str) -> tuple[str, int]:
    stem = Path(name).stem
    image_id, _, idx = stem.rpartition("__r")
    if not image_id or not idx.isdigit():
        raise ValueError(f"RoI file name {name!r} does not follow <image_id>__r<idx>.png")
    return image_id, int(idx)


def _records(manifest: DatasetManifest, split: Optional[str]):
    return [r for r in manifest.records if not is_noise_copy(r) and (split is None or r.split == split)]


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(x: float) -> str:
    return repr(float(x))


# -- CADe ------------------------------------------------------------------

def train_cade_stage(manifest_path, mcfg: CadeModelConfig, tcfg: CadeTrainConfig, out_ckpt) -> Checkpoint:
    manifest = load_manifest(manifest_path)
    train = [r for r in manifest.records if r.split == "train"]
    val = [r for r in manifest.records if r.split == "val" and not is_noise_copy(r)]
    if not train:
        raise ValueError("manifest has no training records")
    ckpt = train_cade(
        DatasetManifest(tuple(train), manifest.source_tag),
        DatasetManifest(tuple(val), manifest.source_tag) if val else None,
        mcfg,
        tcfg,
    )
    ckpt.save(out_ckpt)
    return ckpt


def infer_stage(ckpt_path, manifest_path, out_dir, split: Optional[str] = "test") -> list[Path]:
    detector = Detector(Checkpoint.load(ckpt_path, kind="cade"))
    manifest = load_manifest(manifest_path)
    out = Path(out_dir) / "maps"
    written = []
    for rec in _records(manifest, split):
        pmap = detector(read_image(rec.image_path, rec.bit_depth))
        path = out / f"{rec.image_id}.png"
        write_image(pmap.to_image(), path)
        written.append(path)
    return written


def read_map(path) -> ProbabilityMap:
    return ProbabilityMap.from_image(read_image(path))


# -- RoIs ------------------------------------------------------------------

def extract_detected_rois(
    manifest_path,
    out_dir,
    maps_dir=None,
    ckpt_path=None,
    threshold: float = 0.5,
    k: int = 3,
    min_area: Optional[int] = None,
    split: Optional[str] = "test",
) -> int:
    """Write RoIs for the top-k detected regions of every image.

    Maps are read from ``maps_dir`` when given, otherwise computed with the
    detector checkpoint (and written to ``out_dir/maps``).
    """
    if maps_dir is None and ckpt_path is None:
        raise ValueError("need either a maps directory or a detector checkpoint")
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    detector = Detector(Checkpoint.load(ckpt_path, kind="cade")) if maps_dir is None else None
    rows = []
    for rec in _records(manifest, split):
        img = read_image(rec.image_path, rec.bit_depth)
        if detector is not None:
            pmap = detector(img)
            write_image(pmap.to_image(), out / "maps" / f"{rec.image_id}.png")
        else:
            pmap = read_map(Path(maps_dir) / f"{rec.image_id}.png")
        for idx, region in enumerate(detect_regions(pmap, threshold, k, min_area)):
            box = double_square_box(region.box, img.width, img.height)
            write_image(GrayImage(scale_region(img, box), 8), out / "rois" / roi_name(rec.image_id, idx))
            b = region.box
            rows.append([rec.image_id, idx, b.x0, b.y0, b.w, b.h, region.area, _fmt(region.mean_probability)])
    _write_csv(out / "regions.csv", REGION_HEADER, rows)
    return len(rows)


def truth_lesions(mask_bits: np.ndarray) -> list[np.ndarray]:
    labels, n = ndimage.label(mask_bits, structure=_EIGHT)
    return [labels == i for i in range(1, n + 1)]


def extract_truth_rois(manifest_path, out_dir, splits: Sequence[str] = ("train", "val", "test")) -> int:
    """RoIs around every annotated lesion, with a labels CSV."""
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    rows, regions = [], []
    for rec in manifest.records:
        if is_noise_copy(rec) or rec.split not in splits or rec.mask_path is None:
            continue
        img = read_image(rec.image_path, rec.bit_depth)
        for idx, lesion in enumerate(truth_lesions(read_mask(rec.mask_path).bits)):
            b = BoundingBox.of_mask(lesion)
            box = double_square_box(b, img.width, img.height)
            name = roi_name(rec.image_id, idx)
            write_image(GrayImage(scale_region(img, box), 8), out / "rois" / name)
            rows.append([f"rois/{name}", rec.image_id, idx, rec.label, rec.split])
            regions.append([rec.image_id, idx, b.x0, b.y0, b.w, b.h, int(lesion.sum()), _fmt(1.0)])
    _write_csv(out / "labels.csv", LABELS_HEADER, rows)
    _write_csv(out / "regions.csv", REGION_HEADER, regions)
    return len(rows)


# -- CADi ------------------------------------------------------------------

def train_cadi_stage(rois_dir, labels_csv, mcfg, tcfg, out_ckpt, pretrained=None) -> Checkpoint:
    rois_dir = Path(rois_dir)
    train, val = [], []
    for row in read_csv(labels_csv):
        path = rois_dir / row["roi"]
        if not path.is_file():
            path = rois_dir / "rois" / Path(row["roi"]).name
        item = (read_image(path).pixels, row["label"])
        split = row.get("split") or "train"
        if split == "train":
            train.append(item)
        elif split == "val":
            val.append(item)
    init = None
    if pretrained is not None:
        init, report = cadi_mod.load_pretrained(pretrained, mcfg)
        log.info("pretrained weights: %d loaded, %d skipped", len(report["loaded"]), len(report["skipped"]))
    ckpt = cadi_mod.train_cadi(train, val, mcfg, tcfg, init_state=init)
    ckpt.save(out_ckpt)
    return ckpt


def classify_stage(ckpt_path, rois_dir, out_csv) -> int:
    model = cadi_mod.load_classifier(Checkpoint.load(ckpt_path, kind="cadi"))
    rois_dir = Path(rois_dir)
    files = sorted((rois_dir / "rois").glob("*.png")) if (rois_dir / "rois").is_dir() else sorted(rois_dir.glob("*.png"))
    provenances = [parse_roi_name(f.name) for f in files]
    patches = [read_image(f).pixels for f in files]
    preds = cadi_mod.classify_many(model, patches, provenances)
    rows = sorted(
        ([p.provenance[0], p.provenance[1], _fmt(p.probs[0]), _fmt(p.probs[1]), p.label] for p in preds),
        key=lambda r: (r[0], r[1]),
    )
    _write_csv(out_csv, PREDICTION_HEADER, rows)
    return len(rows)


# -- evaluation --------------------------------------------------------------

def read_predictions(path) -> dict[str, dict[int, tuple[float, str]]]:
    """image_id -> region_idx -> (p_malignant, label)."""
    out: dict[str, dict[int, tuple[float, str]]] = {}
    for row in read_csv(path):
        out.setdefault(row["image_id"], {})[int(row["region_idx"])] = (float(row["p_malignant"]), row["label"])
    return out


def image_label(region_preds: dict[int, tuple[float, str]]) -> str:
    if not region_preds:
        return NOT_DETECTED
    return fuse_views([lab for _, lab in region_preds.values()])


def _roc_entry(scores):
    try:
        return {"auc": roc_auc(scores), "points": roc_curve(scores), "n": len(scores)}
    except MetricError:
        return {"auc": None, "points": [], "n": len(scores)}


def evaluate_stage(
    pred_dir,
    manifest_path,
    out_json,
    maps_dir=None,
    dsc_threshold: float = 0.5,
    threshold: float = 0.5,
    k: int = 3,
    min_area: Optional[int] = None,
    split: Optional[str] = "test",
) -> dict:
    """Score detections, segmentations and classifications of one prediction directory.

    ``pred_dir`` holds ``predictions.csv``, optionally
    ``annotated_predictions.csv``, and ``maps/`` unless ``maps_dir`` is given. Next to ``out_json`` the accepted
    (Dice-matched) region predictions are written to
    ``accepted_predictions.csv``.
    """
    pred_dir = Path(pred_dir)
    maps_dir = Path(maps_dir) if maps_dir is not None else pred_dir / "maps"
    manifest = load_manifest(manifest_path)
    detected_preds = read_predictions(pred_dir / "predictions.csv") if (pred_dir / "predictions.csv").is_file() else {}
    annotated_path = pred_dir / "annotated_predictions.csv"
    annotated_preds = read_predictions(annotated_path) if annotated_path.is_file() else None

    counts = DetectionCounts()
    seg, per_image, accepted_rows = [], [], []
    sizes = {"annotated": [], "predicted": []}
    cls_detected, cls_annotated = [], []
    roc_detected, roc_annotated = [], []
    for rec in _records(manifest, split):
        if rec.mask_path is None:
            continue
        img = read_image(rec.image_path, rec.bit_depth)
        truth = read_mask(rec.mask_path).bits
        pmap = read_map(maps_dir / f"{rec.image_id}.png")
        regions = detect_regions(pmap, threshold, k, min_area)
        lesions = truth_lesions(truth)
        c, pairs = match_detections(regions, lesions, dsc_threshold)
        counts = counts + c

        union = np.zeros_like(truth)
        for r in regions:
            union |= r.mask.bits
        s = seg_scores(union, truth)
        seg.append(s)

        breast_area = int(segment_breast(img).bits.sum())
        sizes["annotated"] += [min(normalized_lesion_size(int(les.sum()), breast_area), 1.0) for les in lesions]
        sizes["predicted"] += [min(normalized_lesion_size(r.area, breast_area), 1.0) for r in regions]

        mine = detected_preds.get(rec.image_id, {})
        accepted = {i: mine[i] for i, _, _ in pairs if i in mine}
        for i in sorted(accepted):
            p_mal, lab = accepted[i]
            accepted_rows.append([rec.image_id, i, _fmt(1.0 - p_mal), _fmt(p_mal), lab])
        det_label = image_label(accepted)
        cls_detected.append((rec.label, det_label))
        if accepted:
            roc_detected.append((max(p for p, _ in accepted.values()), rec.label))
        entry = {
            "image_id": rec.image_id,
            "case_id": rec.case_id,
            "view": rec.view,
            "actual": rec.label,
            "n_truth": len(lesions),
            "n_detected": len(regions),
            "tp": c.tp,
            "matched_dice": [round(d, 12) for _, _, d in pairs],
            "dice": s.dice,
            "hausdorff": s.hausdorff,
            "predicted": det_label,
        }
        if annotated_preds is not None:
            ann = annotated_preds.get(rec.image_id, {})
            ann_label = image_label(ann)
            cls_annotated.append((rec.label, ann_label))
            if ann:
                roc_annotated.append((max(p for p, _ in ann.values()), rec.label))
            entry["predicted_annotated"] = ann_label
        per_image.append(entry)

    if not per_image:
        raise ValueError("no annotated records to evaluate")
    report = {
        "n_images": len(per_image),
        "dsc_threshold": dsc_threshold,
        "detection": {"counts": {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn}, "summary": detection_summary(counts)},
        "segmentation": {"aggregate": seg_aggregate(seg)},
        "classification": {"cade": confusion_table(cls_detected).as_dict()},
        "roc": {"cade": _roc_entry(roc_detected)},
        "lesion_sizes": sizes,
        "images": per_image,
    }
    if annotated_preds is not None:
        report["classification"]["annotated"] = confusion_table(cls_annotated).as_dict()
        report["roc"]["annotated"] = _roc_entry(roc_annotated)
    dump_json(report, out_json)
    _write_csv(Path(out_json).parent / "accepted_predictions.csv", PREDICTION_HEADER, accepted_rows)
    return report


def fuse_stage(predictions_csv, manifest_path, out_json, split: Optional[str] = "test", source: str = "") -> dict:
    preds = read_predictions(predictions_csv)
    manifest = load_manifest(manifest_path)
    subset = DatasetManifest(tuple(_records(manifest, split)), manifest.source_tag)
    diagnoses = []
    for case_id, recs in group_by_case(subset).items():
        views = [(r.view, image_label(preds.get(r.image_id, {}))) for r in recs]
        diagnoses.append(SubjectDiagnosis(case_id, tuple(views), recs[0].label))
    result = subject_report_dict(diagnoses, source=source or Path(predictions_csv).stem)
    dump_json(result, out_json)
    return result


def report_stage(eval_json, subject_jsons: Sequence, out_dir, manifest_path=None, pred_dir=None, n_panels: int = 8,
                 threshold: float = 0.5, k: int = 3, min_area: Optional[int] = None, split: Optional[str] = "test"):
    eval_outputs = json.loads(Path(eval_json).read_text(encoding="utf-8"))
    subjects = [json.loads(Path(p).read_text(encoding="utf-8")) for p in subject_jsons]
    panels = []
    if manifest_path is not None and pred_dir is not None and n_panels > 0:
        manifest = load_manifest(manifest_path)
        for rec in sorted(_records(manifest, split), key=lambda r: r.image_id)[:n_panels]:
            if rec.mask_path is None:
                continue
            img = read_image(rec.image_path, rec.bit_depth)
            pmap = read_map(Path(pred_dir) / "maps" / f"{rec.image_id}.png")
            pred = np.zeros((img.height, img.width), dtype=bool)
            for r in detect_regions(pmap, threshold, k, min_area):
                pred |= r.mask.bits
            panels.append((rec.image_id, img.pixels, read_mask(rec.mask_path).bits, pred))
    return emit_report(eval_outputs, subjects, out_dir, panels)
