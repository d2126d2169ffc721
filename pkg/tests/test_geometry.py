import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umt.geometry import Box, Detection, iou, iou_matrix, match_greedy, nms


def raster_iou(a: Box, b: Box, res: int = 100) -> float:
    """IoU by counting cells of a fine grid covering both boxes."""
    step = 1.0 / res
    x0 = min(a.x, b.x)
    y0 = min(a.y, b.y)
    x1 = max(a.x + a.w, b.x + b.w)
    y1 = max(a.y + a.h, b.y + b.h)
    xs = np.arange(x0 + step / 2, x1, step)
    ys = np.arange(y0 + step / 2, y1, step)
    X, Y = np.meshgrid(xs, ys)
    ina = (X >= a.x) & (X < a.x + a.w) & (Y >= a.y) & (Y < a.y + a.h)
    inb = (X >= b.x) & (X < b.x + b.w) & (Y >= b.y) & (Y < b.y + b.h)
    return (ina & inb).sum() / (ina | inb).sum()


def det(x, y, w, h, score=0.5, cls=1):
    return Detection(Box(x, y, w, h), cls, score)


def reference_nms(dets, thr):
    """O(n^2) suppression: walk score order, keep unless a kept box overlaps."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(iou(dets[i].box, dets[k].box) <= thr for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


boxes = st.builds(Box, st.floats(0, 20), st.floats(0, 20), st.floats(0.5, 10), st.floats(0.5, 10))


class TestIoU:
    def test_identical(self):
        b = Box(1.0, 2.0, 3.0, 4.0)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 1, 1)) == 0.0

    def test_quarter_overlap_against_raster(self):
        a, b = Box(0, 0, 2, 2), Box(1, 1, 2, 2)
        expected = raster_iou(a, b)
        assert expected == pytest.approx(1 / 7, abs=1e-12)
        assert iou(a, b) == pytest.approx(expected, abs=1e-12)

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == pytest.approx(iou(b, a), abs=1e-15)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == pytest.approx(1.0)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = np.c_[rng.uniform(0, 10, (6, 2)), rng.uniform(1, 5, (6, 2))]
        b = np.c_[rng.uniform(0, 10, (4, 2)), rng.uniform(1, 5, (4, 2))]
        m = iou_matrix(a, b)
        for i, j in itertools.product(range(6), range(4)):
            assert m[i, j] == pytest.approx(iou(Box.from_array(a[i]), Box.from_array(b[j])))

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 1)
        with pytest.raises(ValueError):
            Box(float("nan"), 0, 1, 1)


class TestNMS:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_single(self):
        d = det(0, 0, 2, 2, 0.4)
        assert nms([d], 0.5) == [d]

    def test_disjoint_kept(self):
        ds = [det(0, 0, 2, 2, 0.4), det(10, 10, 2, 2, 0.9)]
        assert nms(ds, 0.5) == [ds[1], ds[0]]

    def test_duplicate_suppressed(self):
        ds = [det(0, 0, 4, 4, 0.8), det(0, 0, 4, 4, 0.9)]
        assert nms(ds, 0.5) == [ds[1]]

    def test_score_ties_keep_input_order(self):
        ds = [det(0, 0, 4, 4, 0.7), det(0, 0, 4, 4, 0.7)]
        assert nms(ds, 0.5)[0] is ds[0]

    @settings(max_examples=60)
    @given(st.lists(st.tuples(boxes, st.floats(0.01, 1.0)), max_size=12), st.floats(0, 1))
    def test_against_reference_and_properties(self, items, thr):
        ds = [Detection(b, 1, s) for b, s in items]
        out = nms(ds, thr)
        assert out == reference_nms(ds, thr)
        assert nms(out, thr) == out
        assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)
        for a, b in itertools.combinations(out, 2):
            assert iou(a.box, b.box) <= thr
        for d in ds:
            if not any(d is k for k in out):
                assert any(iou(d.box, k.box) > thr and k.score >= d.score for k in out)

    def test_threshold_extremes(self):
        rng = np.random.default_rng(3)
        ds = [det(*rng.uniform(0, 8, 2), *rng.uniform(1, 5, 2), rng.random()) for _ in range(15)]
        assert len(nms(ds, 1.0)) == len(ds)
        out = nms(ds, 0.0)
        for a, b in itertools.combinations(out, 2):
            assert iou(a.box, b.box) == 0.0


def brute_force_tp_count(dets, gts, thr):
    """Best TP count over all one-to-one assignments of dets to gts."""
    best = 0
    n, m = len(dets), len(gts)
    for perm in itertools.permutations(range(m), min(n, m)):
        for chosen in itertools.combinations(range(n), len(perm)):
            tp = sum(iou(dets[i].box, gts[j][0]) >= thr for i, j in zip(chosen, perm))
            best = max(best, tp)
    return best


class TestMatchGreedy:
    def test_single_tp(self):
        gt = [(Box(0, 0, 10, 10), 1)]
        d = det(0, 0, 10, 6, 0.9)  # IoU 0.6
        tp, matched = match_greedy([d], gt, 0.5)
        assert tp == [True] and matched == [True]

    def test_no_gts(self):
        tp, matched = match_greedy([det(0, 0, 2, 2, 0.3), det(1, 1, 2, 2, 0.2)], [], 0.5)
        assert tp == [False, False] and matched == []

    def test_two_dets_one_gt(self):
        gt = [(Box(0, 0, 10, 10), 1)]
        ds = [det(0, 0, 10, 7, 0.8), det(3, 0, 7, 10, 0.9)]  # both IoU 0.7
        tp, _ = match_greedy(ds, gt, 0.5)
        assert tp == [False, True]
        assert sum(tp) == brute_force_tp_count(ds, gt, 0.5)

    def test_class_mismatch_is_fp(self):
        tp, _ = match_greedy([det(0, 0, 4, 4, 0.9, cls=2)], [(Box(0, 0, 4, 4), 1)], 0.5)
        assert tp == [False]

    def test_iou_tie_lowest_gt_index(self):
        gts = [(Box(0, 0, 4, 4), 1), (Box(0, 0, 4, 4), 1)]
        _, matched = match_greedy([det(0, 0, 4, 4, 0.9)], gts, 0.5)
        assert matched == [True, False]

    def test_properties_random(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n, m = rng.integers(0, 6), rng.integers(0, 4)
            ds = [det(*rng.uniform(0, 10, 2), *rng.uniform(2, 6, 2), rng.random()) for _ in range(n)]
            gts = [(Box(*rng.uniform(0, 10, 2), *rng.uniform(2, 6, 2)), 1) for _ in range(m)]
            counts = [sum(match_greedy(ds, gts, t)[0]) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
            assert counts[0] <= min(n, m)
            assert counts == sorted(counts, reverse=True)
            assert counts[2] <= brute_force_tp_count(ds, gts, 0.5)
