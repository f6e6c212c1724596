import numpy as np
import pytest

from loradet.detector import DetectorConfig, DetectorModel
from loradet.errors import ArgumentError
from loradet.evaluation import Detection, ap_from_pr, average_precision, evaluate, precision_recall
from loradet.geometry import OrientedBox


def box(x, y):
    return OrientedBox(x, y, 10.0, 4.0, 0.2)


def gt_three():
    return {0: [(1, box(10, 10)), (1, box(30, 10)), (1, box(50, 30))]}


def test_perfect_detector_scores_one():
    gt = gt_three()
    dets = [Detection(0, 1, 0.9 - 0.1 * i, b) for i, (_, b) in enumerate(gt[0])]
    m, per_class, ious = average_precision(dets, gt)
    assert m == 1.0 and per_class == {1: 1.0}
    assert ious == pytest.approx([1.0] * 3)


def test_no_detections_scores_zero():
    m, per_class, _ = average_precision([], gt_three())
    assert m == 0.0 and per_class == {1: 0.0}


def test_hand_computed_pr_curve_with_false_positive():
    gt = gt_three()
    dets = [
        Detection(0, 1, 0.9, box(10, 10)),
        Detection(0, 1, 0.8, box(50, 55)),  # no ground truth there
        Detection(0, 1, 0.7, box(30, 10)),
    ]
    m, _, _ = average_precision(dets, gt)
    # Recall steps 1/3 at precision 1 and 1/3 at precision 2/3.
    assert m == pytest.approx(5 / 9, abs=1e-12)


def test_duplicate_detection_counts_once():
    gt = {0: [(1, box(10, 10))]}
    dets = [Detection(0, 1, 0.9, box(10, 10)), Detection(0, 1, 0.8, box(10, 10))]
    m, _, _ = average_precision(dets, gt)
    assert m == 1.0
    tp = np.array([1.0, 0.0])
    prec, rec = precision_recall(tp, 1)
    assert list(prec) == [1.0, 0.5] and list(rec) == [1.0, 1.0]


def test_wrong_class_is_not_matched():
    gt = {0: [(1, box(10, 10)), (2, box(40, 40))]}
    dets = [Detection(0, 2, 0.9, box(10, 10)), Detection(0, 2, 0.8, box(40, 40))]
    m, per_class, _ = average_precision(dets, gt)
    # The false positive outranks the hit, so precision is 1/2 at full recall.
    assert per_class == {1: 0.0, 2: 0.5} and m == 0.25


def test_ap_from_pr_area():
    assert ap_from_pr(np.array([1.0, 0.5]), np.array([0.5, 0.5])) == 0.5


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ArgumentError):
        evaluate(DetectorModel.create(DetectorConfig(), 0), [])
