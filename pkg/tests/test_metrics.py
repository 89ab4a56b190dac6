"""Detection metrics against quadratic reference implementations: exact equality."""

import pytest

from firedet.metrics import (DetRecord, GtRecord, IOU_RANGE, average_precision,
                             map_range, pr_f1)
from firedet.rng import Rng

from oracles import ap_ref, pr_ref

# Coarse coordinate/score grids make exact ties, boundary IoUs, and duplicate
# boxes common, which is where matcher implementations usually diverge.
CENTERS = [0.2, 0.3, 0.4, 0.5, 0.6]
SIZES = [0.1, 0.2, 0.3]
IMAGES = ["a", "b"]


def random_case(rng):
    def box():
        cx = CENTERS[int(rng.integers(1, 0, len(CENTERS))[0])]
        cy = CENTERS[int(rng.integers(1, 0, len(CENTERS))[0])]
        w = SIZES[int(rng.integers(1, 0, len(SIZES))[0])]
        h = SIZES[int(rng.integers(1, 0, len(SIZES))[0])]
        return (cx, cy, w, h)

    n_det = int(rng.integers(1, 0, 6)[0])
    n_gt = int(rng.integers(1, 0, 4)[0])
    dets = [DetRecord(image=IMAGES[int(rng.integers(1, 0, 2)[0])],
                      class_id=int(rng.integers(1, 0, 2)[0]),
                      score=round(float(rng.uniform64(1)[0]), 1),
                      box=box()) for _ in range(n_det)]
    gts = [GtRecord(image=IMAGES[int(rng.integers(1, 0, 2)[0])],
                    class_id=int(rng.integers(1, 0, 2)[0]),
                    box=box()) for _ in range(n_gt)]
    return dets, gts


@pytest.mark.parametrize("seed", range(4))
def test_ap_and_pr_match_reference_on_fuzz(seed):
    rng = Rng(1000 + seed)
    for case in range(300):
        dets, gts = random_case(rng)
        for iou_t in (0.5, 0.75):
            assert average_precision(dets, gts, iou_t) == ap_ref(dets, gts, iou_t), \
                (seed, case, iou_t, dets, gts)
        for conf_t in (0.0, 0.25, 0.55):
            assert pr_f1(dets, gts, 0.5, conf_t) == pr_ref(dets, gts, 0.5, conf_t), \
                (seed, case, conf_t, dets, gts)


def test_map_range_thresholds_match_reference_on_fuzz():
    rng = Rng(77)
    for _ in range(100):
        dets, gts = random_case(rng)
        result = map_range(dets, gts, conf_t=0.25)
        assert set(result.ap_per_threshold) == set(IOU_RANGE)
        for iou_t in IOU_RANGE:
            assert result.ap_per_threshold[iou_t] == ap_ref(dets, gts, iou_t)
        assert result.map50 == result.ap_per_threshold[0.5]
        assert result.map75 == result.ap_per_threshold[0.75]
        expected_mean = sum(result.ap_per_threshold.values()) / len(IOU_RANGE)
        assert result.map50_95 == pytest.approx(expected_mean, rel=1e-12)
        assert (result.precision, result.recall, result.f1) \
            == pr_ref(dets, gts, 0.5, 0.25)


def test_perfect_single_detection():
    dets = [DetRecord("a", 0, 0.9, (0.5, 0.5, 0.2, 0.2))]
    gts = [GtRecord("a", 0, (0.5, 0.5, 0.2, 0.2))]
    assert pr_f1(dets, gts, 0.5, 0.25) == (1.0, 1.0, 1.0)
    assert average_precision(dets, gts, 0.5) == 1.0
    assert map_range(dets, gts).map50_95 == 1.0


def test_duplicate_detection_counts_as_false_positive():
    box = (0.5, 0.5, 0.2, 0.2)
    dets = [DetRecord("a", 0, 0.9, box), DetRecord("a", 0, 0.8, box)]
    gts = [GtRecord("a", 0, box)]
    p, r, f1 = pr_f1(dets, gts, 0.5, 0.25)
    assert (p, r) == (0.5, 1.0)
    assert f1 == pytest.approx(2 / 3)


def test_matching_requires_same_image_and_class():
    box = (0.5, 0.5, 0.2, 0.2)
    gts = [GtRecord("a", 0, box)]
    assert pr_f1([DetRecord("b", 0, 0.9, box)], gts, 0.5, 0.0) == (0.0, 0.0, 0.0)
    assert pr_f1([DetRecord("a", 1, 0.9, box)], gts, 0.5, 0.0) == (0.0, 0.0, 0.0)


def test_map_averages_over_ground_truth_classes():
    box = (0.5, 0.5, 0.2, 0.2)
    dets = [DetRecord("a", 0, 0.9, box)]  # class 0 perfect, class 1 missed
    gts = [GtRecord("a", 0, box), GtRecord("a", 1, (0.9, 0.9, 0.1, 0.1))]
    assert average_precision(dets, gts, 0.5) == 0.5


def test_empty_inputs_and_zero_gt_warning():
    dets = [DetRecord("a", 0, 0.9, (0.5, 0.5, 0.2, 0.2))]
    assert pr_f1([], [], 0.5, 0.25) == (0.0, 0.0, 0.0)
    assert average_precision(dets, [], 0.5) == 0.0
    assert map_range(dets, []).zero_gt_warning is True
    assert map_range(dets, [GtRecord("a", 0, (0.5, 0.5, 0.2, 0.2))]) \
        .zero_gt_warning is False
