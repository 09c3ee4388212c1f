"""IoU, NMS, ROC sweep and AP against hand values and brute-force oracles."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jnn.detection_math import BBox
from jnn.metrics import (APResult, DetectionRecord, MetricError, average_precision, iou, iou_matrix,
                         mean_ap, nms, pr_curve, roc_sweep)


def random_boxes(rng, n):
    xy = rng.uniform(0, 80, (n, 2))
    wh = rng.uniform(5, 40, (n, 2))
    return np.hstack([xy, wh])


def brute_nms(records, thr):
    """Repeatedly keep the most confident remaining box and drop its overlaps."""
    remaining = sorted(enumerate(records), key=lambda p: (-p[1].confidence, p[0]))
    kept = []
    while remaining:
        _, best = remaining.pop(0)
        kept.append(best)
        remaining = [(i, r) for i, r in remaining if iou(best.box, r.box) <= thr]
    return kept


def exhaustive_best_accuracy(scores, labels):
    """Best accuracy over every distinct cut of the sorted scores."""
    best = 0.0
    cuts = sorted(set(scores)) + [np.inf]
    for t in cuts:
        pred = np.asarray(scores) >= t
        best = max(best, float(np.mean(pred == (np.asarray(labels) == 1))))
    return best


class TestIoU:
    def test_identical(self):
        assert iou((3, 4, 5, 6), (3, 4, 5, 6)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0

    def test_touching_edges(self):
        assert iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0

    def test_hand_case(self):
        assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_centre_boxes(self):
        assert iou(BBox(1, 1, 2, 2), BBox(2, 1, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 6), random_boxes(rng, 4)
        m = iou_matrix(a, b)
        for i, j in itertools.product(range(6), range(4)):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-14)

    @given(st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0.5, 30)] * 2),
           st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0.5, 30)] * 2))
    def test_bounded_and_symmetric(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(iou(b, a), abs=1e-12)


class TestNms:
    def test_single(self):
        r = [DetectionRecord(0, "a", (1, 2, 3, 4), 0.3)]
        assert nms(r) == r

    def test_identical_boxes(self):
        r = [DetectionRecord(0, "a", (0, 0, 10, 10), 0.8), DetectionRecord(0, "a", (0, 0, 10, 10), 0.9)]
        assert nms(r, 0.45) == [r[1]]

    def test_empty(self):
        assert nms([]) == []

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n = int(rng.integers(1, 51))
            boxes = random_boxes(rng, n)
            conf = np.round(rng.random(n), 2)  # rounding forces some ties
            recs = [DetectionRecord(0, "a", tuple(b), float(c)) for b, c in zip(boxes, conf)]
            assert nms(recs, 0.45) == brute_nms(recs, 0.45)

    def test_survivors_do_not_overlap(self):
        rng = np.random.default_rng(3)
        recs = [DetectionRecord(0, "a", tuple(b), float(c)) for b, c in zip(random_boxes(rng, 40), rng.random(40))]
        kept = nms(recs, 0.3)
        for x, y in itertools.combinations(kept, 2):
            assert iou(x.box, y.box) <= 0.3

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 80), st.floats(0, 80), st.floats(1, 40), st.floats(1, 40),
                              st.floats(0, 1)), min_size=1, max_size=25),
           st.floats(0.05, 0.95))
    def test_suppression_invariants(self, rows, thr):
        recs = [DetectionRecord(0, "a", r[:4], r[4]) for r in rows]
        kept = nms(recs, thr)
        assert kept and kept[0].confidence == max(r.confidence for r in recs)
        assert [k.confidence for k in kept] == sorted((k.confidence for k in kept), reverse=True)
        for x, y in itertools.combinations(kept, 2):
            assert iou(x.box, y.box) <= thr
        # every dropped box is covered by a kept box at least as confident
        for r in recs:
            if not any(r is k for k in kept):
                assert any(k.confidence >= r.confidence and iou(k.box, r.box) > thr for k in kept)
        assert nms(kept, thr) == kept


class TestRocSweep:
    def test_perfect_separation(self):
        rng = np.random.default_rng(1)
        scores = np.concatenate([rng.uniform(0, 0.4, 50), rng.uniform(0.6, 1, 50)])
        labels = np.r_[np.zeros(50), np.ones(50)]
        rep = roc_sweep(scores, labels)
        assert rep.auc == pytest.approx(1.0, abs=0.01)
        assert rep.best.accuracy == 1.0
        assert len(rep.points) == 20

    def test_constant_scores(self):
        rep = roc_sweep(np.full(10, 0.3), np.r_[np.zeros(5), np.ones(5)])
        assert rep.auc == pytest.approx(0.5, abs=1e-12)

    def test_hand_case(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        rep = roc_sweep(scores, labels, n_thresholds=8)
        # thresholds 0.1, 0.2, ..., 0.8; cuts at 0.2 and 0.3 both misclassify only 0.4
        assert rep.best.accuracy == 0.75
        assert rep.best.threshold == pytest.approx(0.2)

    def test_random_10_items_vs_threshold_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            labels = rng.permutation([0, 1] * 5)
            scores = rng.random(10)
            rep = roc_sweep(scores, labels)
            oracle = max(np.mean((scores >= t) == (labels == 1))
                         for t in np.linspace(scores.min(), scores.max(), 20))
            assert rep.best.accuracy == oracle
            assert rep.best.accuracy <= exhaustive_best_accuracy(scores, labels)

    def test_exhaustive_oracle_on_grid_scores(self):
        # scores on the sweep grid: the sweep sees every distinct cut, so it equals the oracle
        rng = np.random.default_rng(19)
        grid = np.linspace(0, 1, 20)
        for _ in range(50):
            labels = np.array([0, 1] * 5)
            rng.shuffle(labels)
            scores = rng.choice(grid, 10)
            scores[:2] = [0.0, 1.0]
            rep = roc_sweep(scores, labels)
            assert rep.best.accuracy == pytest.approx(exhaustive_best_accuracy(scores, labels), abs=1e-15)

    def test_needs_both_labels(self):
        with pytest.raises(MetricError):
            roc_sweep([0.1, 0.2], [1, 1])

    @settings(max_examples=40)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=30), st.randoms())
    def test_auc_bounds_and_monotone_curve(self, scores, r):
        labels = [i % 2 for i in range(len(scores))]
        r.shuffle(labels)
        rep = roc_sweep(scores, labels)
        assert 0.0 <= rep.auc <= 1.0
        tprs = [p.tpr for p in rep.points]
        assert all(a >= b for a, b in zip(tprs, tprs[1:]))


def rec(conf, box=(0, 0, 10, 10), image=0):
    return DetectionRecord(image, "a", box, conf)


class TestAveragePrecision:
    GT = {0: [(0, 0, 10, 10)]}

    def test_single_hit(self):
        assert average_precision([rec(0.9)], self.GT).ap == 1.0

    def test_tp_then_fp(self):
        r = average_precision([rec(0.9), rec(0.8, (50, 50, 10, 10))], self.GT)
        assert r.ap == 1.0 and r.tp == 1 and r.fp == 1

    def test_fp_then_tp(self):
        assert average_precision([rec(0.9, (50, 50, 10, 10)), rec(0.8)], self.GT).ap == pytest.approx(0.5)

    def test_duplicate_is_false_positive(self):
        r = average_precision([rec(0.9), rec(0.8)], self.GT)
        assert (r.tp, r.fp, r.ap) == (1, 1, 1.0)

    def test_below_iou_threshold(self):
        assert average_precision([rec(0.9, (6, 0, 10, 10))], self.GT).ap == 0.0

    def test_no_detections(self):
        assert average_precision([], self.GT).ap == 0.0

    def test_no_ground_truth_is_undefined(self):
        assert average_precision([rec(0.9)], {0: []}).ap is None

    def test_eleven_point(self):
        r = average_precision([rec(0.9, (50, 50, 10, 10)), rec(0.8)], self.GT, interpolation="11point")
        assert r.ap == pytest.approx(0.5)

    def test_two_gt_hand_curve(self):
        gts = {0: [(0, 0, 10, 10)], 1: [(0, 0, 10, 10)]}
        recs = [rec(0.9, image=0), rec(0.8, (40, 40, 5, 5), image=0), rec(0.7, image=1)]
        # PR points: (0.5, 1), (0.5, 0.5), (1, 2/3) -> area 0.5*1 + 0.5*2/3
        assert average_precision(recs, gts).ap == pytest.approx(0.5 + 1 / 3)
        recall, precision = pr_curve(recs, gts)
        np.testing.assert_allclose(recall, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3])


class TestMeanAP:
    def test_two_classes(self):
        assert mean_ap([APResult("a", 1.0, 1, 0, 1), APResult("b", 0.0, 0, 1, 1)]) == 0.5

    def test_single_class(self):
        assert mean_ap([APResult("a", 0.37, 1, 2, 3)]) == 0.37

    def test_skips_classes_without_gt(self):
        assert mean_ap([APResult("a", 0.6, 1, 0, 1), APResult("b", None, 0, 3, 0)]) == 0.6

    def test_empty(self):
        with pytest.raises(MetricError):
            mean_ap([])
