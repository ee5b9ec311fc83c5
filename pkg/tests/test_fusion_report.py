import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mammocad.fusion import SubjectDiagnosis, fuse_views, subject_report, subject_report_dict
from mammocad.metrics import ConfusionTable, DetectionCounts, detection_summary
from mammocad.report import emit_report, render_tables, size_histogram

LABEL = st.sampled_from(["benign", "malignant", "not_detected"])


def test_fuse_examples():
    assert fuse_views(["benign", "malignant"]) == "malignant"
    assert fuse_views([("MLO", "benign"), ("CC", "benign")]) == "benign"
    assert fuse_views(["not_detected", "not_detected"]) == "not_detected"
    assert fuse_views(["not_detected", "benign"]) == "benign"
    with pytest.raises(ValueError):
        fuse_views([])
    with pytest.raises(ValueError):
        fuse_views(["unsure"])


@given(st.lists(LABEL, min_size=1, max_size=6), st.randoms())
def test_fuse_order_invariant_and_idempotent(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    assert fuse_views(shuffled) == fuse_views(labels)
    assert fuse_views(labels + labels) == fuse_views(labels)
    assert fuse_views(labels + [labels[0]]) == fuse_views(labels)


@given(st.lists(LABEL, min_size=1, max_size=6), st.data())
def test_fuse_monotone_in_malignant(labels, data):
    idx = [i for i, lab in enumerate(labels) if lab == "benign"]
    if not idx:
        return
    i = data.draw(st.sampled_from(idx))
    changed = labels[:i] + ["malignant"] + labels[i + 1:]
    assert fuse_views(changed) == "malignant"
    if fuse_views(labels) == "malignant":
        assert fuse_views(changed) == "malignant"


@given(st.lists(LABEL, min_size=1, max_size=6))
def test_fused_label_rule(labels):
    fused = SubjectDiagnosis("c", tuple(("MLO", lab) for lab in labels), "benign").fused
    assert (fused == "malignant") == ("malignant" in labels)
    assert (fused == "not_detected") == all(lab == "not_detected" for lab in labels)


def _subjects(rows):
    """Subjects whose fused labels realise the given per-class counts."""
    out = []
    for actual, counts in zip(("benign", "malignant"), rows):
        counts = list(counts) + [0] * (3 - len(counts))
        for predicted, n in zip(("benign", "malignant", "not_detected"), counts):
            for _ in range(n):
                out.append(SubjectDiagnosis(f"S{len(out)}", (("MLO", predicted), ("CC", predicted)), actual))
    return out


def test_subject_report_reference_rows():
    table, acc = subject_report(_subjects([(11, 6, 5), (18, 54, 9)]))
    assert table.total == 103
    assert table.per_class_accuracy("benign") == 11 / 17
    assert table.per_class_accuracy("malignant") == 54 / 72
    assert acc == 65 / 103
    table, acc = subject_report(_subjects([(9, 11), (11, 72)]))
    assert acc == 81 / 103


def test_subject_report_single_correct():
    table, acc = subject_report(_subjects([(1,), ()]))
    assert acc == 1.0 and table.per_class_accuracy("benign") == 1.0


@given(st.lists(st.tuples(st.sampled_from(["benign", "malignant"]), st.lists(LABEL, min_size=1, max_size=2)),
                min_size=1, max_size=30))
def test_subject_report_totals(items):
    diags = [SubjectDiagnosis(f"S{i}", tuple(("MLO", v) for v in views), actual) for i, (actual, views) in enumerate(items)]
    table, acc = subject_report(diags)
    assert table.total == len(diags)
    d = subject_report_dict(diags)
    assert d["n_subjects"] == len(diags) and len(d["subjects"]) == len(diags)
    assert acc == sum(x.fused == x.actual for x in diags) / len(diags)


def test_size_histogram_counts(rng):
    sizes = {"annotated": list(rng.uniform(1e-4, 1, 37)), "predicted": [0.05, 0.1, 0.1000001, 1.0]}
    hist = size_histogram(sizes)
    assert len(hist) == 20
    assert sum(h["annotated"] for h in hist) == 37
    assert sum(h["predicted"] for h in hist) == 4
    # right-closed bins
    assert hist[0]["predicted"] == 1 and hist[1]["predicted"] == 1 and hist[2]["predicted"] == 1
    assert hist[19]["predicted"] == 1
    with pytest.raises(ValueError):
        size_histogram({"x": [0.0]})


def _eval_outputs():
    cade = ConfusionTable.from_counts((15, 10, 21), (41, 73, 50))
    ann = ConfusionTable.from_counts((36, 10, 0), (46, 118, 0))
    counts = DetectionCounts(8, 3, 2)
    return {
        "classification": {"cade": cade.as_dict(), "annotated": ann.as_dict()},
        "detection": {"counts": {"tp": 8, "fp": 3, "fn": 2}, "summary": detection_summary(counts)},
        "segmentation": {"aggregate": {"dice_mean": 0.7, "dice_std": 0.1, "hausdorff_mean": 3.0, "hausdorff_std": 1.0}},
        "roc": {"cade": {"auc": 0.75, "points": [[1.9, 0.0, 0.0], [0.5, 0.5, 1.0], [0.1, 1.0, 1.0]]}},
        "lesion_sizes": {"annotated": [0.01, 0.02, 0.3], "predicted": [0.015, 0.2]},
    }


def test_tables_render_reference_percentages():
    md = render_tables(_eval_outputs(), [subject_report_dict(_subjects([(11, 6, 5), (18, 54, 9)]), "cade")])
    for text in ("60.00%", "64.04%", "41.90%", "78.26%", "71.95%", "73.33%", "64.71%", "75.00%", "63.11%"):
        assert text in md


def test_table_cells_equal_eval_outputs():
    ev = _eval_outputs()
    md = render_tables(ev, [])
    rows = [line.split("|")[1:-1] for line in md.splitlines() if line.startswith("| ") and "Label" not in line]
    source = None
    for cells in rows[:4]:
        cells = [c.strip() for c in cells]
        source = cells[0] or source
        table = ev["classification"][source]
        cls = cells[1].lower()
        assert [int(cells[2]), int(cells[3]), int(cells[5])] == [
            table["rows"][cls]["benign"], table["rows"][cls]["malignant"], table["rows"][cls]["not_detected"]]
        assert cells[4] == f"{100 * table['per_class_accuracy'][cls]:.2f}%"


def test_emit_report_files_and_determinism(tmp_path):
    ev = _eval_outputs()
    subjects = [subject_report_dict(_subjects([(2, 1), (0, 3, 1)]), "cade")]
    img = np.arange(64, dtype=np.uint8).reshape(8, 8)
    panels = [("P1", img, img > 30, img > 40)]
    first = emit_report(ev, subjects, tmp_path / "a", panels)
    emit_report(ev, subjects, tmp_path / "b", panels)
    names = sorted(p.relative_to(tmp_path / "a").as_posix() for p in first)
    assert names == ["panels/P1.png", "report.json", "roc.csv", "size_hist.csv", "tables.md"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    report = json.loads((tmp_path / "a/report.json").read_text())
    assert report["evaluation"] == json.loads(json.dumps(ev))
    assert report["subjects"]["cade"]["n_subjects"] == 7
    with open(tmp_path / "a/size_hist.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["annotated"]) for r in rows) == 3 and sum(int(r["predicted"]) for r in rows) == 2
    with open(tmp_path / "a/roc.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
