import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_pq, micro_scene, miou_oracle
from taxograph.metrics import (ConfusionMatrix, Segment, metrics_report, panoptic_quality,
                               panoptic_quality_dataset, random_baseline_miou, segmentation_metrics)


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 1]])
    assert segmentation_metrics(gt, gt, 3) == {"miou": 1.0, "accuracy": 1.0, "mean_f1": 1.0}


def test_hand_counted_case():
    m = segmentation_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    assert m["miou"] == pytest.approx(7 / 12)
    assert m["accuracy"] == pytest.approx(3 / 4)
    assert m["mean_f1"] == pytest.approx((2 / 3 + 4 / 5) / 2)


def test_absent_class_excluded():
    m = segmentation_metrics(np.array([0, 1]), np.array([0, 1]), 5)
    assert m["miou"] == 1.0
    report = metrics_report(ConfusionMatrix(5).update(np.array([0, 1]), np.array([0, 1])), list("abcde"))
    assert report["per_class"]["c"]["iou"] is None


def test_shape_and_range_errors():
    with pytest.raises(ValueError):
        segmentation_metrics(np.zeros(3, int), np.zeros(4, int), 2)
    with pytest.raises(ValueError):
        segmentation_metrics(np.array([2]), np.array([0]), 2)


def test_confusion_counts_total():
    r = np.random.default_rng(0)
    cm = ConfusionMatrix(4)
    for _ in range(3):
        cm.update(r.integers(0, 4, size=(5, 5)), r.integers(0, 4, size=(5, 5)))
    assert cm.counts.sum() == 75 and np.all(cm.counts >= 0)


def test_sequence_input_pools_counts():
    r = np.random.default_rng(1)
    preds = [r.integers(0, 3, size=(4, 4)) for _ in range(3)]
    gts = [r.integers(0, 3, size=(4, 4)) for _ in range(3)]
    pooled = segmentation_metrics(np.stack(preds), np.stack(gts), 3)
    assert segmentation_metrics(preds, gts, 3) == pooled


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_miou_matches_oracle_and_bounds(L, seed):
    r = np.random.default_rng(seed)
    gt, pred = r.integers(0, L, size=(4, 5)), r.integers(0, L, size=(4, 5))
    m = segmentation_metrics(pred, gt, L)
    assert m["miou"] == pytest.approx(miou_oracle(pred, gt, L), abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in m.values())


def test_random_baseline_is_low():
    r = np.random.default_rng(0)
    gts = [r.integers(0, 7, size=(8, 8)) for _ in range(5)]
    assert random_baseline_miou(gts, 7) < 0.2
    assert random_baseline_miou(gts, 7, seed=3) == random_baseline_miou(gts, 7, seed=3)


# ------------------------------------------------------------------ PQ

def test_pq_perfect():
    m = np.array([[True, False], [True, True]])
    segs = [(m, 0, 0), (~m, 1, 1)]
    assert panoptic_quality(segs, segs, things={1})["pq"] == 1.0


def test_pq_iou_06():
    gt = np.array([True, True, True, False, False])
    pred = np.ones(5, bool)  # intersection 3, union 5
    assert panoptic_quality([(pred, 0, 0)], [(gt, 0, 0)])["pq"] == 0.6


def test_pq_half_iou_is_not_a_match():
    gt = np.array([True, True, True, False])
    pred = np.array([False, True, True, True])  # IoU exactly 1/2
    assert panoptic_quality([(pred, 0, 0)], [(gt, 0, 0)])["pq"] == 0.0


def test_pq_empty_prediction():
    assert panoptic_quality([], [(np.ones(3, bool), 0, 0)])["pq"] == 0.0


def test_pq_thing_stuff_split():
    a = np.array([True, True, False, False, False])
    b = ~a
    thing_gt = np.array([False, False, True, True, False])
    r = panoptic_quality([(a, 0, 0), (b, 1, 1)], [(a, 0, 0), (thing_gt, 1, 1)], things={1})
    assert r["pq_stuff"] == 1.0
    assert r["pq_thing"] == pytest.approx(2 / 3, abs=1e-16)
    assert r["pq"] == pytest.approx(5 / 6, abs=1e-16)


def test_pq_overlap_rejected():
    m = np.array([True, True])
    with pytest.raises(ValueError):
        panoptic_quality([(m, 0, 1), (m, 0, 2)], [])


def test_pq_accepts_segment_objects():
    m = np.array([True, False])
    assert panoptic_quality([Segment(m, 2, 1)], [Segment(m, 2, 1)])["pq"] == 1.0


def test_pq_dataset_pools_counts():
    a = np.array([True, True, False])
    scenes = [([(a, 0, 0)], [(a, 0, 0)]), ([], [(a, 0, 0)])]
    # TP=1 (IoU 1), FN=1 -> 1 / 1.5; a per-scene average would give 0.5
    assert panoptic_quality_dataset(scenes)["pq"] == pytest.approx(2 / 3, abs=0)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pq_matches_brute_force(seed):
    pred, gt = micro_scene(np.random.default_rng(seed))
    got = panoptic_quality(pred, gt, things={1, 2})
    assert got == brute_force_pq(pred, gt, things={1, 2})
    assert all(0.0 <= v <= 1.0 for v in got.values())
