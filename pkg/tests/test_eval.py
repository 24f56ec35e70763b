import numpy as np
import pytest

from semidet.evaluate import (
    DEFAULT_THRESHOLDS,
    average_precision,
    evaluate_detections,
    pseudo_quality,
)
from semidet.geometry import BBox, Detection

from oracles import hand_pr_ap


def _det(box, score):
    return Detection(BBox(*box), score)


def test_single_detection_iou_06():
    # one GT, one detection with IoU 0.6: perfect at 0.5, zero at 0.75
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    det = _det((0.0, 4.0, 10.0, 14.0), 0.9)  # overlap 60 of union 140... adjust
    # overlap: y in [4, 10] -> 6 * 10 = 60; union 200 - 60 = 140 -> 0.429
    det = _det((0.0, 2.5, 10.0, 12.5), 0.9)  # overlap 75, union 125 -> 0.6
    assert average_precision([[det]], [gt], 0.5) == 1.0
    assert average_precision([[det]], [gt], 0.75) == 0.0


def test_perfect_detections_map_one():
    rng = np.random.default_rng(0)
    dets, gts = [], []
    for _ in range(5):
        n = int(rng.integers(1, 4))
        xy = rng.uniform(0, 80, size=(n, 2))
        wh = rng.uniform(5, 30, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        gts.append(boxes)
        dets.append([_det(tuple(b), 0.9) for b in boxes])
    report = evaluate_detections(dets, gts)
    assert report.map == 1.0
    assert report.ap50 == 1.0 and report.ap75 == 1.0


def test_three_image_fixture_hand_pr_table():
    # 3 GT over 3 images; detections: TP(0.9), TP(0.8), FP(0.7); 1 FN
    gt1 = np.array([[0.0, 0.0, 10.0, 10.0]])
    gt2 = np.array([[20.0, 20.0, 40.0, 40.0]])
    gt3 = np.array([[50.0, 50.0, 70.0, 70.0]])
    d1 = _det((0.0, 2.0, 10.0, 12.0), 0.9)   # IoU 2/3 TP at 0.5
    d2 = _det((20.0, 24.0, 40.0, 44.0), 0.8)  # IoU 0.6 TP
    d3 = _det((80.0, 80.0, 95.0, 95.0), 0.7)  # FP
    ap50 = average_precision([[d1], [d2], [d3]], [gt1, gt2, gt3], 0.5)
    expected = hand_pr_ap([True, True, False], n_gt=3)
    assert ap50 == pytest.approx(expected, abs=1e-12)
    assert ap50 == pytest.approx(67 / 101, abs=1e-12)


def test_duplicate_lower_score_detection_never_increases_ap():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 4))
        xy = rng.uniform(0, 60, size=(n, 2))
        wh = rng.uniform(5, 25, size=(n, 2))
        gt = np.concatenate([xy, xy + wh], axis=1)
        dets = [_det(tuple(b), float(s)) for b, s in zip(gt, rng.uniform(0.5, 1.0, n))]
        base = average_precision([dets], [gt], 0.5)
        dup = dets + [_det(tuple(gt[0]), 0.1)]
        with_dup = average_precision([dup], [gt], 0.5)
        assert with_dup <= base + 1e-12


def test_ap_rank_invariance_under_monotone_rescale():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n_img = int(rng.integers(1, 4))
        dets, gts = [], []
        for _ in range(n_img):
            n = int(rng.integers(0, 4))
            xy = rng.uniform(0, 60, size=(n, 2))
            wh = rng.uniform(5, 25, size=(n, 2))
            gt = np.concatenate([xy, xy + wh], axis=1)
            gts.append(gt)
            img_dets = []
            for b in gt:
                noisy = b + rng.uniform(-6, 6, size=4)
                noisy = [
                    min(noisy[0], noisy[2] - 1), min(noisy[1], noisy[3] - 1),
                    max(noisy[2], noisy[0] + 1), max(noisy[3], noisy[1] + 1),
                ]
                img_dets.append(_det(tuple(noisy), float(rng.uniform(0.2, 0.9))))
            dets.append(img_dets)
        base = average_precision(dets, gts, 0.5)
        rescaled = [
            [_det(d.box.as_tuple(), 0.05 + 0.9 * d.score**3) for d in img]
            for img in dets
        ]
        assert average_precision(rescaled, gts, 0.5) == pytest.approx(base, abs=1e-12)


def test_map_never_exceeds_ap50():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dets, gts = [], []
        for _ in range(3):
            n = int(rng.integers(1, 4))
            xy = rng.uniform(0, 60, size=(n, 2))
            wh = rng.uniform(5, 25, size=(n, 2))
            gt = np.concatenate([xy, xy + wh], axis=1)
            gts.append(gt)
            dets.append(
                [
                    _det(tuple(b + rng.uniform(-4, 4, size=4).clip(-4, 4)), float(s))
                    for b, s in zip(gt + [[0, 0, 1, 1]], rng.uniform(0.3, 1, n))
                ]
            )
        report = evaluate_detections(dets, gts)
        assert report.map <= report.ap50 + 1e-12
        for t in DEFAULT_THRESHOLDS:
            assert 0.0 <= report.ap_per_threshold[t] <= 1.0


def test_no_gt_no_dets_ap_zero():
    assert average_precision([[]], [np.zeros((0, 4))], 0.5) == 0.0


def test_evaluate_report_fields():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    report = evaluate_detections([[_det((0, 0, 10, 10), 0.9)]], [gt])
    assert report.iou_thresholds == DEFAULT_THRESHOLDS
    assert report.map == pytest.approx(
        float(np.mean([report.ap_per_threshold[t] for t in DEFAULT_THRESHOLDS]))
    )
    assert report.num_images == 1 and report.num_gt == 1
    d = report.to_json_dict()
    assert set(d) >= {"iou_thresholds", "ap_per_threshold", "map", "ap50",
                      "ap75", "pr_curves", "version"}
    assert len(d["pr_curves"]["0.50"]) == 101


# -------------------------------------------------------------- pseudo stats


def test_pseudo_quality_perfect():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    stats = pseudo_quality([[_det((0, 0, 10, 10), 1.0)]], [gt])
    assert stats["precision"] == 1.0 and stats["recall"] == 1.0
    assert stats["mean_confidence"] == 1.0


def test_pseudo_quality_empty():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    stats = pseudo_quality([[]], [gt])
    assert stats["precision"] == 0.0 and stats["recall"] == 0.0
    assert stats["count"] == 0


def test_pseudo_quality_histogram_sums_to_count():
    rng = np.random.default_rng(4)
    dets = [[_det((0, 0, 10, 10), float(s)) for s in rng.uniform(0.5, 1.0, 7)]]
    stats = pseudo_quality(dets, [np.zeros((0, 4))])
    assert sum(stats["confidence_histogram"]) == stats["count"] == 7
    assert len(stats["confidence_histogram"]) == 20


def test_pseudo_quality_partial():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]])
    dets = [[_det((0, 0, 10, 10), 0.9), _det((80, 80, 90, 90), 0.8)]]
    stats = pseudo_quality([dets[0]], [gt])
    assert stats["precision"] == 0.5
    assert stats["recall"] == 0.5
