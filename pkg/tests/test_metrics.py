import math

import numpy as np
import pytest

from pseudolabel3d.metrics import (
    GroundTruth, InstancePrediction, average_precision, format_csv, format_report,
    instance_ap, miou, mprec_mrec, predictions_from_labels,
)

import oracles


def rng_masks(*ranges):
    return [np.arange(a, b) for a, b in ranges]


def three_gt():
    inst = np.repeat([0, 1, 2], 10)
    return GroundTruth(inst, np.zeros(30, np.int64))


def five_preds():
    g0, g1, g2 = rng_masks((0, 10), (10, 20), (20, 30))
    return [
        InstancePrediction(g0, 0, 0.9),              # TP
        InstancePrediction(g0, 0, 0.8),              # duplicate -> FP
        InstancePrediction(g1, 0, 0.7),              # TP
        InstancePrediction(np.arange(20, 24), 0, 0.6),  # IoU 0.4 with g2
        InstancePrediction(g2, 0, 0.5),              # TP at 0.5, FP at 0.25
    ]


def test_hand_pr_fixture_ap50():
    # flags T F T F T over 3 gt: envelope 1, 2/3, 3/5 at recalls 1/3, 2/3, 1
    res = instance_ap(five_preds(), three_gt(), iou_thresholds=(0.5,))
    assert res.ap50 == pytest.approx(34 / 45, abs=1e-9)
    assert res.ap == pytest.approx(34 / 45, abs=1e-9)


def test_hand_pr_fixture_ap25():
    # at 0.25 the IoU-0.4 prediction grabs g2 first: flags T F T T F
    res = instance_ap(five_preds(), three_gt())
    assert res.ap25 == pytest.approx(5 / 6, abs=1e-9)


def test_hand_prec_rec():
    p, r = mprec_mrec(five_preds(), three_gt())
    assert p == pytest.approx(3 / 5, abs=1e-12)
    assert r == pytest.approx(1.0, abs=1e-12)


def test_perfect_predictions():
    gt = GroundTruth(np.array([0, 0, 1, 1, 2, -1]), np.array([0, 0, 1, 1, 1, -1]))
    preds = [InstancePrediction(np.array([0, 1]), 0), InstancePrediction(np.array([2, 3]), 1),
             InstancePrediction(np.array([4]), 1)]
    res = instance_ap(preds, gt)
    assert (res.ap, res.ap50, res.ap25) == (1.0, 1.0, 1.0)
    assert mprec_mrec(preds, gt) == (1.0, 1.0)


def test_no_predictions_zero():
    res = instance_ap([], three_gt())
    assert (res.ap, res.ap50, res.ap25) == (0.0, 0.0, 0.0)


def test_spurious_prediction_lowers_precision_only():
    gt = GroundTruth(np.array([0, 0, 1, 1, -1, -1]), np.array([0, 0, 0, 0, -1, -1]))
    preds = [InstancePrediction(np.array([0, 1]), 0, 0.9), InstancePrediction(np.array([2, 3]), 0, 0.8),
             InstancePrediction(np.array([4, 5]), 0, 0.1)]
    p, r = mprec_mrec(preds, gt)
    assert p < 1.0 and r == 1.0


def test_ap_single_list():
    assert average_precision([True, False, True, False, True], 3) == pytest.approx(34 / 45, abs=1e-12)
    assert average_precision([], 2) == 0.0
    assert math.isnan(average_precision([True], 0))


def test_ap_monotone_in_extra_correct_prediction():
    gt = three_gt()
    preds = five_preds()[:3]
    before = instance_ap(preds, gt)
    after = instance_ap(preds + [InstancePrediction(np.arange(20, 30), 0, 0.05)], gt)
    assert after.ap >= before.ap and after.ap50 >= before.ap50


def test_ap_permutation_invariant():
    rng = np.random.default_rng(0)
    preds = five_preds()
    base = instance_ap(preds, three_gt())
    for _ in range(5):
        shuffled = [preds[i] for i in rng.permutation(len(preds))]
        assert instance_ap(shuffled, three_gt()).ap == base.ap


def test_miou_equal_and_disjoint():
    gt = np.array([0, 0, 1, 1, 2])
    _, mean = miou(gt, gt, 3)
    assert mean == 1.0
    _, mean = miou((gt + 1) % 3, gt, 3)
    assert mean == 0.0


def test_miou_half_flipped():
    # class 0 has 4 points, two flipped to class 1 (which also has 4):
    # class 0: TP 2, FN 2 -> 1/2; class 1: TP 4, FP 2 -> 2/3
    gt = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    pred = np.array([1, 1, 0, 0, 1, 1, 1, 1])
    iou, mean = miou(pred, gt, 2)
    assert iou[0] == pytest.approx(0.5, abs=1e-9)
    assert iou[1] == pytest.approx(2 / 3, abs=1e-9)
    assert mean == pytest.approx(7 / 12, abs=1e-9)


def test_miou_ignore_and_absent():
    gt = np.array([0, 0, -1, 2])
    pred = np.array([0, -1, 1, 2])
    iou, mean = miou(pred, gt, 4)
    assert iou[0] == 0.5 and iou[2] == 1.0
    assert math.isnan(iou[1]) and math.isnan(iou[3])  # gt-ignored point does not count
    assert mean == 0.75


def random_eval_scene(rng, n=60):
    n_inst = int(rng.integers(1, 6))
    gt_inst = rng.integers(-1, n_inst, n)
    cls_of = rng.integers(0, 3, n_inst)
    gt_cls = np.where(gt_inst >= 0, cls_of[np.maximum(gt_inst, 0)], -1)
    preds = []
    for _ in range(int(rng.integers(0, 7))):
        if rng.random() < 0.6 and (gt_inst >= 0).any():
            base = np.flatnonzero(gt_inst == rng.choice(np.unique(gt_inst[gt_inst >= 0])))
            keep = base[rng.random(len(base)) < rng.uniform(0.3, 1.0)]
            extra = rng.choice(n, int(rng.integers(0, 4)), replace=False)
            mask = np.unique(np.concatenate([keep, extra]))
        else:
            mask = np.unique(rng.choice(n, int(rng.integers(1, 12)), replace=False))
        if len(mask) == 0:
            continue
        preds.append((mask.tolist(), int(rng.integers(0, 3)), float(rng.choice([0.2, 0.5, 0.9]))))
    return gt_inst, gt_cls, preds


def test_ap_matches_brute_force_on_random_scenes():
    rng = np.random.default_rng(42)
    for _ in range(60):
        gt_inst, gt_cls, preds = random_eval_scene(rng)
        if not (gt_inst >= 0).any():
            continue
        gt = GroundTruth(gt_inst, gt_cls)
        objs = [InstancePrediction(np.array(mk), c, s) for mk, c, s in preds]
        for t in (0.25, 0.5, 0.75):
            got = instance_ap(objs, gt, iou_thresholds=(t,)).ap
            assert got == pytest.approx(oracles.brute_ap(preds, gt_inst, gt_cls, t), abs=1e-9)
            lo, hi = oracles.brute_ap_range(preds, gt_inst, gt_cls, t)
            assert lo - 1e-9 <= got <= hi + 1e-9
        p, r = mprec_mrec(objs, gt)
        bp, br = oracles.brute_prec_rec(preds, gt_inst, gt_cls)
        assert (p, r) == pytest.approx((bp, br), abs=1e-12)


def test_miou_matches_confusion_loop():
    rng = np.random.default_rng(3)
    for _ in range(30):
        gt = rng.integers(-1, 5, 80)
        pred = rng.integers(-1, 5, 80)
        iou, mean = miou(pred, gt, 5)
        want, want_mean = oracles.confusion_miou(pred.tolist(), gt.tolist(), 5)
        assert mean == pytest.approx(want_mean, abs=1e-12)
        for a, b in zip(iou, want):
            assert (math.isnan(a) and b is None) or a == pytest.approx(b, abs=1e-12)


def test_ground_truth_mixed_class_rejected():
    with pytest.raises(ValueError):
        GroundTruth(np.array([0, 0]), np.array([1, 2])).instance_masks()


def test_predictions_from_labels_skips_ignore():
    preds = predictions_from_labels(np.array([0, 0, 1, -1]), {0: 2, 1: -1})
    assert len(preds) == 1 and preds[0].mask.tolist() == [0, 1] and preds[0].confidence == 1.0


def test_report_formats():
    assert format_report({"AP": 0.5, "n": 3}) == "AP = 0.500000\nn = 3\n"
    assert format_csv([["a", 1.0]], ["class", "iou"]) == "class,iou\na,1.000000\n"
