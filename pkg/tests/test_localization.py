from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acol.localization import (
    BBox,
    LocMetrics,
    SamplePrediction,
    evaluate,
    iou,
    largest_connected_component,
    map_to_box,
    segment_foreground,
    tight_bbox,
    write_metrics,
    write_sample_details,
)
from oracles import flood_fill_largest, iou_by_enumeration, random_box


class TestSegment:
    def test_threshold(self):
        np.testing.assert_array_equal(segment_foreground(np.array([[0.1, 0.9]]), 0.2), [[False, True]])

    def test_zero_map(self):
        assert not segment_foreground(np.zeros((4, 4))).any()

    def test_matches_pixel_enumeration(self):
        rng = np.random.default_rng(0)
        m = rng.random((8, 8))
        m /= m.max()
        fg = segment_foreground(m, 0.2)
        for (i, j), v in np.ndenumerate(m):
            assert fg[i, j] == (v > 0.2)


class TestLargestComponent:
    def test_bigger_blob_wins(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0:2] = True  # size 2
        mask[3, 1:4] = True  # size 3
        np.testing.assert_array_equal(largest_connected_component(mask), flood_fill_largest(mask))
        assert largest_connected_component(mask).sum() == 3

    def test_diagonal_is_connected(self):
        mask = np.eye(4, dtype=bool)
        assert largest_connected_component(mask).sum() == 4
        assert largest_connected_component(mask, connectivity=4).sum() == 1

    def test_full_grid(self):
        assert largest_connected_component(np.ones((3, 4), dtype=bool)).all()

    def test_empty(self):
        assert not largest_connected_component(np.zeros((3, 3), dtype=bool)).any()

    def test_tie_prefers_first_pixel(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[3, 0:2] = True
        mask[0, 2:4] = True
        out = largest_connected_component(mask)
        assert out[0, 2] and not out[3, 0]


@pytest.mark.parametrize("connectivity", [4, 8])
def test_component_matches_flood_fill_on_random_masks(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(300):
        mask = rng.random((16, 16)) < rng.uniform(0.2, 0.7)
        np.testing.assert_array_equal(
            largest_connected_component(mask, connectivity), flood_fill_largest(mask, connectivity)
        )


class TestTightBox:
    def test_single_cell_scaled(self):
        comp = np.zeros((8, 8), dtype=bool)
        comp[2, 3] = True  # row 2, column 3
        assert tight_bbox(comp, (64, 64)) == BBox(24, 16, 32, 24)

    def test_full_grid(self):
        assert tight_bbox(np.ones((8, 8), dtype=bool), (64, 64)) == BBox(0, 0, 64, 64)

    def test_l_shape_extremes(self):
        comp = np.zeros((6, 6), dtype=bool)
        comp[1:5, 1] = True
        comp[4, 1:4] = True
        rows, cols = np.nonzero(comp)
        assert tight_bbox(comp) == BBox(cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)

    def test_outward_rounding(self):
        comp = np.zeros((3, 3), dtype=bool)
        comp[1, 1] = True
        # 1 cell of 10/3 px: [3.33, 6.67) -> [3, 7)
        assert tight_bbox(comp, (10, 10)) == BBox(3, 3, 7, 7)

    def test_empty(self):
        assert tight_bbox(np.zeros((4, 4), dtype=bool)) is None


class TestIou:
    def test_identical(self):
        assert iou(BBox(1, 2, 5, 9), BBox(1, 2, 5, 9)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 2, 2), BBox(2, 2, 4, 4)) == 0.0

    def test_known_value(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)
        assert iou_by_enumeration(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == Fraction(1, 7)

    def test_matches_pixel_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == float(iou_by_enumeration(a, b))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox(3, 0, 3, 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng, 32), random_box(rng, 32)
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0 <= v <= 1
    assert (v == 1) == (a == b)


def test_map_to_box():
    m = np.zeros((8, 8))
    m[2:4, 1:3] = 1.0
    m[6, 6] = 0.9
    assert map_to_box(m) == BBox(1, 2, 3, 4)


GT = BBox(10, 10, 30, 30)


def pred(guesses, boxes, gtk=None):
    return SamplePrediction(list(guesses), list(boxes), gtk)


class TestEvaluate:
    def test_all_exact(self):
        preds = [pred([0, 1], [GT, GT], GT), pred([1, 0], [GT, GT], GT)]
        m = evaluate(preds, [(0, GT), (1, GT)], k=2)
        assert (m.top1_loc_err, m.topk_loc_err, m.gt_known_loc_err, m.cls_err) == (0, 0, 0, 0)

    def test_iou_threshold_is_strict(self):
        low = BBox(10, 10, 30, 18)  # IoU = 160/400 = 0.4
        assert iou(low, GT) == pytest.approx(0.4)
        m = evaluate([pred([0], [low], low)], [(0, GT)], k=1)
        assert m.top1_loc_err == 1.0 and m.cls_err == 0.0

    def test_exactly_half_is_an_error(self):
        half = BBox(10, 10, 30, 20)
        assert iou(half, GT) == 0.5
        assert evaluate([pred([0], [half], half)], [(0, GT)], k=1).top1_loc_err == 1.0

    def test_counting(self):
        preds = [pred([0], [GT], GT), pred([2], [GT], GT)]
        m = evaluate(preds, [(0, GT), (1, GT)], k=1)
        assert m.top1_loc_err == 0.5 and m.cls_err == 0.5
        assert m.gt_known_loc_err == 0.0

    def test_topk_uses_later_guesses(self):
        m = evaluate([pred([2, 0], [GT, GT], GT)], [(0, GT)], k=2)
        assert m.top1_loc_err == 1.0 and m.topk_loc_err == 0.0

    def test_k_box_limits_boxes(self):
        m = evaluate([pred([2, 0], [GT, GT], GT)], [(0, GT)], k=2, k_box=1)
        assert m.topk_loc_err == 1.0

    def test_missing_box_is_error(self):
        m = evaluate([pred([0], [None], None)], [(0, GT)], k=1)
        assert m.top1_loc_err == 1.0 and m.gt_known_loc_err == 1.0

    def test_missing_ground_truth(self):
        with pytest.raises(ValueError):
            evaluate([pred([0], [GT])], [None], k=1)
        with pytest.raises(ValueError):
            evaluate([pred([0], [GT])], [], k=1)

    def test_too_few_guesses(self):
        with pytest.raises(ValueError):
            evaluate([pred([0], [GT])], [(0, GT)], k=2)

    def test_json_outputs(self, tmp_path):
        import json

        m = evaluate([pred([0, 1], [GT, GT], GT)], [(0, GT)], k=2)
        d = json.loads(write_metrics(m, tmp_path / "m.json").read_text())
        assert set(d) >= {"top1_loc_err", "top5_loc_err", "gt_known_loc_err", "cls_err", "n"}
        lines = write_sample_details(m, tmp_path / "d.jsonl").read_text().splitlines()
        row = json.loads(lines[0])
        assert row["pred_box"] == GT.as_list() and row["iou"] == 1.0 and row["hit_rank"] == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_orderings(seed):
    rng = np.random.default_rng(seed)
    n, c = 12, 5
    gts, preds = [], []
    for _ in range(n):
        label = int(rng.integers(c))
        gt = random_box(rng, 32)
        guesses = [int(g) for g in rng.permutation(c)]
        boxes = [gt if rng.random() < 0.5 else random_box(rng, 32) for _ in guesses]
        # the true-category box is the one a correct guess would carry
        gtk = boxes[guesses.index(label)]
        gts.append((label, gt))
        preds.append(SamplePrediction(guesses, boxes, gtk))
    prev = None
    for k in range(1, c + 1):
        m = evaluate(preds, gts, k=k)
        assert m.gt_known_loc_err <= m.top1_loc_err
        assert m.topk_loc_err <= m.top1_loc_err
        if prev is not None:
            assert m.topk_loc_err <= prev
        prev = m.topk_loc_err
    assert isinstance(m, LocMetrics)
