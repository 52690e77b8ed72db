import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dakd.core import IGNORE, LabelMap
from dakd.metrics import ConfusionMatrix, accumulate, compute_report


def brute_force_counts(pred, gt, C):
    """Per-pixel double loop oracle."""
    counts = np.zeros((C, C), dtype=np.int64)
    ignored = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            g, p = gt[i, j], pred[i, j]
            if g == IGNORE:
                ignored += 1
            else:
                counts[g, p] += 1
    return counts, ignored


def random_pair(rng, C=6, size=16, ignore_frac=0.1):
    pred = rng.integers(0, C, size=(size, size))
    gt = rng.integers(0, C, size=(size, size))
    gt[rng.uniform(size=gt.shape) < ignore_frac] = IGNORE
    return (LabelMap(pred, num_classes=C), LabelMap(gt, num_classes=C))


def test_diagonal_on_perfect_prediction():
    rng = np.random.default_rng(0)
    lm = LabelMap(rng.integers(0, 4, size=(8, 8)), num_classes=4)
    cm = accumulate(ConfusionMatrix(4), lm, lm)
    assert np.all(cm.counts == np.diag(np.diag(cm.counts)))
    assert cm.total_counted == 64


def test_all_ignore_counts_unchanged():
    gt = LabelMap(np.full((8, 8), IGNORE), num_classes=4)
    pred = LabelMap(np.zeros((8, 8), dtype=np.int64), num_classes=4)
    cm = accumulate(ConfusionMatrix(4), pred, gt)
    assert cm.counts.sum() == 0
    assert cm.ignored_pixels == 64


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        pred, gt = random_pair(rng)
        cm = accumulate(ConfusionMatrix(6), pred, gt)
        counts, ignored = brute_force_counts(pred.data, gt.data, 6)
        assert np.array_equal(cm.counts, counts)
        assert cm.ignored_pixels == ignored


def test_report_hand_built_example():
    pred = LabelMap(np.array([[0, 1], [1, 1]]), num_classes=2)
    gt = LabelMap(np.array([[0, 1], [0, 1]]), num_classes=2)
    cm = accumulate(ConfusionMatrix(2), pred, gt)
    rep = compute_report(cm)
    assert rep.per_class_iou[0] == pytest.approx(0.5)
    assert rep.per_class_iou[1] == pytest.approx(2 / 3)
    assert rep.miou == pytest.approx(7 / 12)
    assert rep.pixel_accuracy == pytest.approx(0.75)


def test_perfect_prediction_report():
    rng = np.random.default_rng(1)
    lm = LabelMap(rng.integers(0, 3, size=(8, 8)), num_classes=3)
    rep = compute_report(accumulate(ConfusionMatrix(3), lm, lm))
    assert rep.miou == 1.0
    assert rep.pixel_accuracy == 1.0


def test_absent_class_excluded_from_mean():
    pred = LabelMap(np.zeros((4, 4), dtype=np.int64), num_classes=3)
    gt = LabelMap(np.zeros((4, 4), dtype=np.int64), num_classes=3)
    rep = compute_report(accumulate(ConfusionMatrix(3), pred, gt))
    assert np.isnan(rep.per_class_iou[1]) and np.isnan(rep.per_class_iou[2])
    assert rep.miou == 1.0
    rep0 = compute_report(accumulate(ConfusionMatrix(3), pred, gt),
                          undefined_as_zero=True)
    assert rep0.miou == pytest.approx(1 / 3)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        compute_report(ConfusionMatrix(3))


def test_pred_with_ignore_rejected():
    gt = LabelMap(np.zeros((4, 4), dtype=np.int64), num_classes=3)
    pred = LabelMap(np.full((4, 4), IGNORE), num_classes=3)
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(3), pred, gt)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_merge_equals_concatenation(seed):
    rng = np.random.default_rng(seed)
    pairs = [random_pair(rng) for _ in range(4)]
    whole = ConfusionMatrix(6)
    for pred, gt in pairs:
        whole = accumulate(whole, pred, gt)
    left = ConfusionMatrix(6)
    for pred, gt in pairs[:2]:
        left = accumulate(left, pred, gt)
    right = ConfusionMatrix(6)
    for pred, gt in pairs[2:]:
        right = accumulate(right, pred, gt)
    merged = left.merge(right)
    assert np.array_equal(merged.counts, whole.counts)
    assert merged.ignored_pixels == whole.ignored_pixels
    assert compute_report(merged).miou == compute_report(whole).miou


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_class_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pair(rng, ignore_frac=0.0)
    perm = rng.permutation(6)
    rep = compute_report(accumulate(ConfusionMatrix(6), pred, gt))
    pred_p = LabelMap(perm[pred.data], num_classes=6)
    gt_p = LabelMap(perm[gt.data], num_classes=6)
    rep_p = compute_report(accumulate(ConfusionMatrix(6), pred_p, gt_p))
    assert rep_p.miou == pytest.approx(rep.miou, abs=1e-12)
    assert rep_p.pixel_accuracy == pytest.approx(rep.pixel_accuracy, abs=1e-12)
    for c in range(6):
        assert rep_p.per_class_iou[perm[c]] == pytest.approx(
            rep.per_class_iou[c], abs=1e-12, nan_ok=True)


def test_iou_one_iff_purely_diagonal():
    counts = np.array([[5, 0, 0], [0, 3, 1], [0, 0, 2]])
    rep = compute_report(ConfusionMatrix(3, counts))
    assert rep.per_class_iou[0] == 1.0
    assert rep.per_class_iou[1] < 1.0
    assert rep.per_class_iou[2] < 1.0
