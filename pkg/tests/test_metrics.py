import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glandseg.metrics import confusion, dice, evaluate_dataset, miou, object_f1

masks_2d = hnp.arrays(np.bool_, (6, 7), elements=st.booleans())


def B(rows):
    return np.array(rows, dtype=bool)


def counts(pred, gt):
    c = confusion(pred, gt)
    return c.tp, c.fp, c.fn, c.tn


def test_confusion_all_true():
    assert counts(np.ones((2, 2), bool), np.ones((2, 2), bool)) == (4, 0, 0, 0)


def test_confusion_all_false_positive():
    assert counts(np.ones((2, 2), bool), np.zeros((2, 2), bool)) == (0, 4, 0, 0)


def test_confusion_cross():
    pred = B([[1, 1], [0, 0]])
    gt = B([[1, 0], [1, 0]])
    assert counts(pred, gt) == (1, 1, 1, 1)


def test_confusion_dimension_mismatch():
    with pytest.raises(ValueError):
        confusion(np.ones((2, 2), bool), np.ones((2, 3), bool))


@given(masks_2d, masks_2d)
def test_confusion_counts_partition_pixels(pred, gt):
    tp, fp, fn, tn = counts(pred, gt)
    assert tp + fp + fn + tn == pred.size


def test_dice_identical_masks():
    m = B([[1, 0], [1, 1]])
    assert dice(m, m) == 1.0


def test_dice_disjoint_masks():
    assert dice(B([[1, 0]]), B([[0, 1]])) == 0.0


def test_dice_half_overlap():
    pred = B([[1, 1], [0, 0]])
    gt = B([[1, 0], [1, 0]])
    assert dice(pred, gt) == 0.5


def test_dice_both_empty():
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0


def test_miou_identical():
    m = B([[1, 0], [0, 1]])
    assert miou(m, m) == 1.0


def test_miou_half_gland():
    pred = np.ones((2, 2), bool)
    gt = B([[1, 1], [0, 0]])
    assert miou(pred, gt) == 0.25


def test_miou_complement():
    m = B([[1, 0], [0, 1]])
    assert miou(m, ~m) == 0.0


def test_miou_both_empty():
    z = np.zeros((2, 2), bool)
    assert miou(z, z) == 1.0


@given(masks_2d, masks_2d)
def test_dice_and_miou_symmetric(a, b):
    assert dice(a, b) == dice(b, a)
    assert miou(a, b) == miou(b, a)


@given(masks_2d, masks_2d)
def test_dice_dominates_gland_iou(a, b):
    tp, fp, fn, _ = counts(a, b)
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    assert dice(a, b) >= iou - 1e-12


def test_object_f1_single_identical_object():
    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    assert object_f1(m, m) == 1.0


def test_object_f1_missing_object():
    gt = np.zeros((8, 8), bool)
    gt[1:4, 1:4] = True
    assert object_f1(np.zeros((8, 8), bool), gt) == 0.0


def test_object_f1_one_of_two_matched():
    gt = np.zeros((6, 12), bool)
    gt[1:5, 1:5] = True
    gt[1:5, 7:11] = True
    pred = np.zeros((6, 12), bool)
    pred[1:5, 1:5] = True
    assert object_f1(pred, gt) == pytest.approx(2 / 3)


def test_object_f1_both_empty():
    z = np.zeros((4, 4), bool)
    assert object_f1(z, z) == 1.0


def test_object_f1_spurious_prediction():
    pred = np.zeros((4, 4), bool)
    pred[0, 0] = True
    assert object_f1(pred, np.zeros((4, 4), bool)) == 0.0


def test_object_f1_iou_exactly_half_does_not_match():
    # Overlap 2, union 4: IoU = 0.5 is not strictly above the threshold.
    gt = np.zeros((1, 8), bool)
    gt[0, 0:3] = True
    pred = np.zeros((1, 8), bool)
    pred[0, 1:4] = True
    # IoU = 2/4 = 0.5 exactly.
    assert object_f1(pred, gt) == 0.0
    pred2 = np.zeros((1, 8), bool)
    pred2[0, 0:3] = True
    assert object_f1(pred2, gt) == 1.0


def test_object_f1_greedy_takes_best_pair_first():
    # One pred overlapping two gt objects; it must match the higher-IoU one.
    gt = np.zeros((3, 9), bool)
    gt[0:3, 0:4] = True
    gt[0:3, 5:9] = True
    pred = np.zeros((3, 9), bool)
    pred[0:3, 1:9] = True  # spans the gap, connected through column 4
    # Single pred object: IoU with right gt (12/24=0.5) vs left (9/27=1/3).
    # Neither exceeds 0.5 strictly, so no match at the default threshold.
    assert object_f1(pred, gt) == 0.0
    assert object_f1(pred, gt, iou_threshold=0.45) == pytest.approx(2 / 3)


def test_object_f1_uses_4_connectivity():
    # Two diagonal pixels are separate objects under 4-connectivity.
    gt = np.zeros((4, 4), bool)
    gt[0, 0] = True
    gt[1, 1] = True
    pred = np.zeros((4, 4), bool)
    pred[0, 0] = True
    assert object_f1(pred, gt) == pytest.approx(2 / 3)


@given(masks_2d, masks_2d, st.integers(0, 3), st.integers(0, 3))
def test_object_f1_translation_invariant(pred, gt, dy, dx):
    big_p = np.zeros((12, 13), bool)
    big_g = np.zeros((12, 13), bool)
    big_p[dy:dy + 6, dx:dx + 7] = pred
    big_g[dy:dy + 6, dx:dx + 7] = gt
    ref_p = np.zeros((12, 13), bool)
    ref_g = np.zeros((12, 13), bool)
    ref_p[:6, :7] = pred
    ref_g[:6, :7] = gt
    assert object_f1(big_p, big_g) == object_f1(ref_p, ref_g)


def test_evaluate_dataset_single_image():
    m = np.zeros((6, 6), bool)
    m[1:4, 1:4] = True
    rep = evaluate_dataset([("a", m, m)])
    assert rep.count == 1
    assert rep.images[0].dice == rep.mean_dice == 1.0
    assert rep.mean_miou == 1.0 and rep.mean_f1 == 1.0


def test_evaluate_dataset_mean_is_arithmetic():
    a = np.zeros((2, 2), bool)
    gt_a = np.zeros((2, 2), bool)
    b = np.ones((2, 2), bool)
    gt_b = B([[1, 1], [0, 0]])
    rep = evaluate_dataset([("a", a, gt_a), ("b", b, gt_b)])
    assert rep.mean_miou == pytest.approx((1.0 + 0.25) / 2)


def test_evaluate_dataset_sorts_by_name():
    m1 = np.zeros((3, 3), bool)
    m1[0, 0] = True
    m2 = np.ones((3, 3), bool)
    gt = np.zeros((3, 3), bool)
    r1 = evaluate_dataset([("x", m1, gt), ("y", m2, gt)])
    r2 = evaluate_dataset([("y", m2, gt), ("x", m1, gt)])
    assert r1.mean_dice == r2.mean_dice
    assert [r.name for r in r1.images] == [r.name for r in r2.images] == ["x", "y"]


def test_evaluate_dataset_empty():
    rep = evaluate_dataset([])
    assert rep.count == 0 and rep.mean_dice == 0.0


@given(masks_2d, masks_2d)
def test_dice_iou_identity(pred, gt):
    tp, fp, fn, _ = counts(pred, gt)
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    assert dice(pred, gt) == pytest.approx(2 * iou / (1 + iou), abs=1e-12)
