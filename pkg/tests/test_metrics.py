import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mammocad.metrics import (
    ConfusionTable, DetectionCounts, MetricError, SegScores, confusion_table, detection_summary, dice,
    f_score, hausdorff, match_detections, roc_auc, roc_curve, seg_aggregate, seg_scores,
)

from oracles import dice_sets, hausdorff_sets, max_matched, pairwise_auc, pixel_set


def _mask(shape, pts):
    m = np.zeros(shape, bool)
    for r, c in pts:
        m[r, c] = True
    return m


def test_dice_examples():
    a = _mask((4, 4), [(0, 0), (1, 1)])
    assert dice(a, a) == 1.0
    assert dice(a, _mask((4, 4), [(3, 3)])) == 0.0
    assert dice(a, _mask((4, 4), [(0, 0), (2, 2)])) == 0.5
    with pytest.raises(MetricError, match="undefined Dice"):
        dice(np.zeros((2, 2), bool), np.zeros((2, 2), bool))
    with pytest.raises(MetricError):
        dice(np.ones((2, 2), bool), np.ones((3, 3), bool))


def test_hausdorff_examples():
    a = _mask((12, 12), [(0, 0)])
    assert hausdorff(a, _mask((12, 12), [(3, 4)])) == 5.0
    assert hausdorff(_mask((12, 12), [(0, 0), (10, 0)]), a) == 10.0
    assert hausdorff(a, a) == 0.0
    assert hausdorff(a, _mask((12, 12), [(3, 4)]), spacing=(0.5, 0.5)) == 2.5
    with pytest.raises(MetricError):
        hausdorff(a, np.zeros((12, 12), bool))


def test_dice_hausdorff_match_set_oracles(rng):
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(1, 17, size=2)
        a = rng.random((h, w)) < rng.uniform(0.05, 0.7)
        b = rng.random((h, w)) < rng.uniform(0.05, 0.7)
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        sa, sb = pixel_set(a), pixel_set(b)
        worst = max(worst, abs(dice(a, b) - dice_sets(sa, sb)), abs(hausdorff(a, b) - hausdorff_sets(sa, sb)))
    assert worst <= 1e-9


def test_boundary_hausdorff_equals_full_for_filled_blobs():
    a = np.zeros((20, 20), bool)
    a[3:9, 3:9] = True
    b = np.zeros((20, 20), bool)
    b[10:17, 12:18] = True
    assert hausdorff(a, b, boundary=True) == hausdorff(a, b)


@given(arrays(bool, (6, 7)), arrays(bool, (6, 7)))
def test_symmetry(a, b):
    if a.any() or b.any():
        assert dice(a, b) == dice(b, a)
    if a.any() and b.any():
        assert hausdorff(a, b) == hausdorff(b, a)


@given(arrays(bool, (6, 7)))
def test_self_comparison(a):
    if a.any():
        assert dice(a, a) == 1.0
        assert hausdorff(a, a) == 0.0


def test_seg_scores_conventions():
    empty = np.zeros((4, 4), bool)
    full = np.ones((4, 4), bool)
    assert seg_scores(empty, full) == SegScores(0.0, None)
    assert seg_scores(empty, empty) == SegScores(1.0, 0.0)


def test_match_examples():
    t = _mask((6, 6), [(1, 1), (1, 2), (2, 1), (2, 2)])
    assert match_detections([t], [t])[0] == DetectionCounts(1, 0, 0)
    # dice 0.4: 1 overlap, sizes 1 + 4
    p = _mask((6, 6), [(1, 1)])
    assert dice(p, t) == 0.4
    assert match_detections([p], [t])[0] == DetectionCounts(0, 1, 1)


def test_match_three_predictions_two_truths():
    t1 = _mask((8, 8), [(0, 0), (0, 1)])
    t2 = _mask((8, 8), [(0, 2), (0, 3)])
    p1 = _mask((8, 8), [(0, 0), (0, 1), (0, 2), (0, 3)])  # dice 2/3 with both truths
    p2 = _mask((8, 8), [(0, 0), (0, 1), (1, 0), (1, 1)])  # dice 2/3 with t1 only
    p3 = _mask((8, 8), [(7, 7)])
    counts, pairs = match_detections([p1, p2, p3], [t1, t2])
    assert counts == DetectionCounts(2, 1, 0) and counts.tp == max_matched([p1, p2, p3], [t1, t2])
    assert sorted((i, j) for i, j, _ in pairs) == [(0, 1), (1, 0)]


def test_match_equals_exhaustive_oracle(rng):
    for _ in range(400):
        s = int(rng.integers(3, 7))
        preds = [rng.random((s, s)) < rng.uniform(0.05, 0.6) for _ in range(rng.integers(0, 5))]
        truths = [rng.random((s, s)) < rng.uniform(0.05, 0.6) for _ in range(rng.integers(0, 5))]
        counts, pairs = match_detections(preds, truths)
        assert counts.tp == max_matched(preds, truths)
        assert counts.tp + counts.fp == len(preds) and counts.tp + counts.fn == len(truths)
        assert len({i for i, _, _ in pairs}) == len({j for _, j, _ in pairs}) == len(pairs)
        assert all(d >= 0.5 for _, _, d in pairs)


@given(st.lists(arrays(bool, (4, 4)), max_size=4), st.lists(arrays(bool, (4, 4)), max_size=4))
def test_match_tp_bounded(preds, truths):
    counts, _ = match_detections(preds, truths)
    assert counts.tp <= min(len(preds), len(truths))


def test_detection_summary_examples():
    s = detection_summary(DetectionCounts(1, 0, 0))
    assert (s["accuracy"], s["precision"], s["recall"], s["f_score"]) == (1.0, 1.0, 1.0, 1.0)
    s = detection_summary(DetectionCounts(0, 1, 1))
    assert (s["accuracy"], s["precision"], s["recall"], s["f_score"]) == (0.0, 0.0, 0.0, 0.0)
    s = detection_summary(DetectionCounts(0, 0, 2))
    assert s["precision"] == 0.0 and "precision" in s["undefined"]
    s = detection_summary(DetectionCounts(3, 1, 2))
    assert s["accuracy"] == 3 / 6 and s["precision"] == 0.75 and s["recall"] == 0.6


def test_f_score_consistency_with_reference_rates():
    assert abs(f_score(0.34, 0.32) - 0.33) < 0.005
    # counts realising precision 0.34 and recall 0.32 exactly
    s = detection_summary(DetectionCounts(272, 528, 578))
    assert s["precision"] == pytest.approx(0.34) and s["recall"] == pytest.approx(0.32)
    assert abs(s["f_score"] - 0.33) < 0.005


TABLE2 = {
    "cade": ((15, 10, 21), (41, 73, 50)),
    "annotated": ((36, 10, 0), (46, 118, 0)),
}


def test_confusion_table_reference_rows():
    cade = ConfusionTable.from_counts(*TABLE2["cade"])
    assert cade.per_class_accuracy("benign") == 15 / 25
    assert cade.per_class_accuracy("malignant") == 73 / 114
    assert cade.prediction_accuracy == 88 / 210
    ann = ConfusionTable.from_counts(*TABLE2["annotated"])
    assert ann.prediction_accuracy == 154 / 210


def test_confusion_table_single_correct():
    t = confusion_table([("malignant", "malignant")])
    assert t.per_class_accuracy("malignant") == 1.0 and t.prediction_accuracy == 1.0
    assert t.per_class_accuracy("benign") is None
    with pytest.raises(MetricError):
        confusion_table([])
    with pytest.raises(MetricError):
        confusion_table([("benign", "maybe")])


pairs_strategy = st.lists(
    st.tuples(st.sampled_from(["benign", "malignant"]), st.sampled_from(["benign", "malignant", "not_detected"])),
    min_size=1, max_size=60,
)


@given(pairs_strategy)
def test_confusion_rows_and_accuracies(pairs):
    t = confusion_table(pairs)
    for cls in ("benign", "malignant"):
        assert t.class_total(cls) == sum(a == cls for a, _ in pairs)
        classified = sum(a == cls and p != "not_detected" for a, p in pairs)
        correct = sum(a == cls and p == cls for a, p in pairs)
        got = t.per_class_accuracy(cls)
        if classified:
            assert round(100 * got, 2) == round(100 * correct / classified, 2)
        else:
            assert got is None
    assert round(100 * t.prediction_accuracy, 2) == round(100 * sum(a == p for a, p in pairs) / len(pairs), 2)
    d = t.as_dict()
    assert d["total"] == len(pairs)


def test_roc_auc_examples():
    assert roc_auc([(0.1, "benign"), (0.9, "malignant")]) == 1.0
    assert roc_auc([(0.5, "benign"), (0.5, "malignant"), (0.5, "benign")]) == 0.5
    scores = [0.1, 0.4, 0.35, 0.8]
    labels = ["benign", "benign", "malignant", "malignant"]
    assert roc_auc(list(zip(scores, labels))) == 0.75
    with pytest.raises(MetricError):
        roc_auc([(0.2, "benign"), (0.3, "benign")])


def test_roc_auc_matches_pairwise_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        s = np.round(rng.random(n), 1)  # plenty of ties
        assert roc_auc(list(zip(s, y))) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


@given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=2, max_size=30))
def test_roc_auc_invariant_under_increasing_map(data):
    labels = [y for _, y in data]
    if all(labels) or not any(labels):
        return
    base = roc_auc(data)
    for fn in (math.exp, lambda v: v ** 3, lambda v: 2 * v + 1):
        mapped = [fn(v) for v, _ in data]
        # skip maps that float rounding makes non-strict on this sample
        if any((a < b) != (ma < mb) for (a, _), ma in zip(data, mapped) for (b, _), mb in zip(data, mapped)):
            continue
        assert roc_auc([(fn(s), y) for s, y in data]) == pytest.approx(base, abs=1e-12)


def test_roc_curve_endpoints():
    curve = roc_curve([(0.2, "benign"), (0.7, "malignant"), (0.4, "malignant"), (0.1, "benign")])
    assert curve[-1][1:] == (1.0, 1.0)
    fprs = [f for _, f, _ in curve]
    assert fprs == sorted(fprs)


def test_seg_aggregate_examples(rng):
    agg = seg_aggregate([SegScores(0.5, 4.0)])
    assert (agg["dice_mean"], agg["dice_std"], agg["hausdorff_mean"], agg["hausdorff_std"]) == (0.5, 0.0, 4.0, 0.0)
    agg = seg_aggregate([SegScores(0.0, None), SegScores(1.0, 2.0)])
    assert (agg["dice_mean"], agg["dice_std"]) == (0.5, 0.5)
    assert agg["n_hausdorff"] == 1
    vals = rng.random(50)
    agg = seg_aggregate([SegScores(v, 10 * v) for v in vals])
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    assert agg["dice_mean"] == pytest.approx(mean, abs=1e-12)
    assert agg["dice_std"] == pytest.approx(math.sqrt(var), abs=1e-12)
    with pytest.raises(MetricError):
        seg_aggregate([])
