"""Tracking metrics at the 256x256 convention, checked against loops and hand counts."""
import numpy as np
import pytest

from src.errors import ArgumentError, DimensionError
from src.metrics import (
    EVAL_SIZE, THRESHOLDS, EvalRecord, average_jaccard, compute_metrics, delta_avg, delta_k,
    endpoint_error, jaccard_counts, jaccard_k, occlusion_accuracy,
)


def record(pred, gt, pred_vis=None, gt_vis=None, valid=None, size=EVAL_SIZE, query_index=0):
    pred = np.asarray(pred, dtype=np.float64)
    t, n = pred.shape[:2]
    ones = np.ones((t, n))
    return EvalRecord(
        pred, ones if pred_vis is None else pred_vis, gt, ones if gt_vis is None else gt_vis,
        ones if valid is None else valid, size, size, query_index,
    )


def shifted(rng, t, n, dx):
    gt = rng.uniform(0, EVAL_SIZE, size=(t, n, 2))
    pred = gt.copy()
    pred[..., 0] += dx
    return pred, gt


def random_record(rng, t=6, n=20, size=EVAL_SIZE):
    gt = rng.uniform(0, size, size=(t, n, 2))
    pred = gt + rng.normal(0.0, 6.0 * size / EVAL_SIZE, size=gt.shape)
    return EvalRecord(
        pred, rng.random((t, n)), gt, rng.random((t, n)) > 0.3, rng.random((t, n)) > 0.1,
        size, size, int(rng.integers(0, t)),
    )


def four_point_record():
    """Frame 0 is the query frame; frame 1 holds four hand-built cases."""
    gt = np.zeros((2, 4, 2))
    pred = np.zeros((2, 4, 2))
    pred[1, 1, 0] = 3.0  # visible both ways, 3 px off
    pred_vis = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=float)  # point 3 predicted occluded
    gt_vis = np.array([[1, 1, 1, 1], [1, 1, 0, 1]], dtype=float)  # point 2 occluded
    return EvalRecord(pred, pred_vis, gt, gt_vis, np.ones((2, 4)), EVAL_SIZE, EVAL_SIZE, 0)


class TestDelta:
    def test_zero_error_is_100(self, rng):
        pred, gt = shifted(rng, 4, 10, 0.0)
        metrics = compute_metrics([record(pred, gt)])
        assert all(v == 100.0 for v in metrics.values())

    def test_twenty_pixels_at_k16(self, rng):
        pred, gt = shifted(rng, 4, 10, 20.0)
        assert delta_k([record(pred, gt)], 16) == 0.0

    def test_uniform_three_pixels(self, rng):
        pred, gt = shifted(rng, 4, 10, 3.0)
        rec = [record(pred, gt)]
        assert [delta_k(rec, k) for k in THRESHOLDS] == [0.0, 0.0, 100.0, 100.0, 100.0]
        assert delta_avg(rec) == pytest.approx(60.0)

    def test_matches_loop_oracle(self, rng):
        recs = [random_record(rng) for _ in range(3)]
        for k in THRESHOLDS:
            per_video = []
            for rec in recs:
                hits = total = 0
                for t in range(rec.valid.shape[0]):
                    if t == rec.query_index:
                        continue
                    for i in range(rec.valid.shape[1]):
                        if rec.valid[t, i] and rec.gt_vis[t, i]:
                            total += 1
                            d = rec.pred_tracks[t, i] - rec.gt_tracks[t, i]
                            hits += np.hypot(*d) < k
                per_video.append(100.0 * hits / total)
            assert delta_k(recs, k) == pytest.approx(np.mean(per_video), abs=1e-12)

    def test_monotone_in_k(self, rng):
        for _ in range(20):
            recs = [random_record(rng)]
            values = [delta_k(recs, k) for k in THRESHOLDS]
            assert values == sorted(values)

    def test_nonpositive_k_rejected(self, rng):
        pred, gt = shifted(rng, 2, 3, 0.0)
        with pytest.raises(ArgumentError):
            delta_k([record(pred, gt)], 0)

    def test_empty_set_is_absent(self, rng):
        pred, gt = shifted(rng, 2, 3, 0.0)
        rec = record(pred, gt, gt_vis=np.zeros((2, 3)))
        assert delta_k([rec], 4) is None
        assert delta_avg([rec]) is None

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            EvalRecord(np.zeros((2, 3, 2)), np.ones((2, 3)), np.zeros((2, 4, 2)), np.ones((2, 4)),
                       np.ones((2, 4)), 64, 64)


class TestOcclusionAccuracy:
    def test_perfect_and_inverted(self, rng):
        pred, gt = shifted(rng, 3, 8, 0.0)
        bits = rng.random((3, 8)) > 0.5
        assert occlusion_accuracy([record(pred, gt, bits, bits)]) == 100.0
        assert occlusion_accuracy([record(pred, gt, ~bits, bits)]) == 0.0

    def test_random_matches_loop(self, rng):
        rec = random_record(rng, t=5, n=30)
        agree = total = 0
        for t in range(5):
            for i in range(30):
                if t != rec.query_index and rec.valid[t, i]:
                    total += 1
                    agree += rec.pred_vis[t, i] == rec.gt_vis[t, i]
        assert occlusion_accuracy([rec]) == pytest.approx(100.0 * agree / total, abs=1e-12)

    def test_threshold_is_half(self, rng):
        pred, gt = shifted(rng, 2, 2, 0.0)
        rec = record(pred, gt, pred_vis=np.full((2, 2), 0.5))
        assert occlusion_accuracy([rec]) == 100.0


class TestJaccard:
    def test_perfect(self, rng):
        pred, gt = shifted(rng, 3, 5, 0.0)
        assert average_jaccard([record(pred, gt)]) == 100.0

    def test_all_predicted_occluded(self, rng):
        pred, gt = shifted(rng, 3, 5, 0.0)
        assert average_jaccard([record(pred, gt, pred_vis=np.zeros((3, 5)))]) == 0.0

    def test_hand_enumerated_four_points(self):
        rec = four_point_record()
        assert jaccard_counts(rec, 2) == (1, 2, 2)
        assert jaccard_counts(rec, 4) == (2, 1, 1)
        assert jaccard_k([rec], 1) == pytest.approx(20.0)
        assert jaccard_k([rec], 16) == pytest.approx(50.0)
        assert average_jaccard([rec]) == pytest.approx(38.0)
        assert occlusion_accuracy([rec]) == pytest.approx(50.0)
        assert delta_avg([rec]) == pytest.approx((2 * 200.0 / 3 + 300.0) / 5)

    def test_bounded_by_recall(self, rng):
        for _ in range(20):
            rec = random_record(rng)
            recalls = []
            for k in THRESHOLDS:
                tp, _, fn = jaccard_counts(rec, k)
                recalls.append(100.0 * tp / (tp + fn))
            assert average_jaccard([rec]) <= np.mean(recalls) + 1e-9


class TestProtocolAndScale:
    def test_rescale_invariance(self, rng):
        small = random_record(rng, size=EVAL_SIZE)
        big = EvalRecord(small.pred_tracks * 2, small.pred_vis.astype(float), small.gt_tracks * 2,
                         small.gt_vis, small.valid, 2 * EVAL_SIZE, 2 * EVAL_SIZE, small.query_index)
        assert compute_metrics([small]) == compute_metrics([big])

    def test_query_first_counts_only_later_frames(self):
        gt = np.zeros((3, 1, 2))
        pred = gt.copy()
        pred[0, 0, 0] = 50.0
        rec = EvalRecord(pred, np.ones((3, 1)), gt, np.ones((3, 1)), np.ones((3, 1)),
                         EVAL_SIZE, EVAL_SIZE, query_index=1)
        assert delta_avg([rec], "strided") == pytest.approx(50.0)
        assert delta_avg([rec], "first") == pytest.approx(100.0)

    def test_strided_skips_query_frame(self):
        gt = np.zeros((3, 1, 2))
        pred = gt.copy()
        pred[1, 0, 0] = 50.0
        pred_vis = np.array([[1.0], [0.0], [1.0]])
        rec = EvalRecord(pred, pred_vis, gt, np.ones((3, 1)), np.ones((3, 1)),
                         EVAL_SIZE, EVAL_SIZE, query_index=1)
        metrics = compute_metrics([rec])
        assert metrics["delta_avg"] == pytest.approx(100.0)
        assert metrics["occlusion_accuracy"] == pytest.approx(100.0)
        assert metrics["average_jaccard"] == pytest.approx(100.0)

    def test_unknown_protocol(self, rng):
        with pytest.raises(ArgumentError):
            occlusion_accuracy([random_record(rng)], "sideways")


class TestEndpointError:
    def test_mean_and_median(self):
        gt = np.zeros((1, 2, 2, 2))
        pred = gt.copy()
        pred[0, 0, 0] = [3.0, 4.0]
        out = endpoint_error(pred, gt)
        assert out == {"mean": 1.25, "median": 0.0, "count": 4}

    def test_mask_and_empty(self):
        gt = np.zeros((2, 2, 2))
        pred = np.ones((2, 2, 2))
        assert endpoint_error(pred, gt, np.zeros((2, 2)))["count"] == 0
        assert endpoint_error(pred, gt, np.eye(2))["mean"] == pytest.approx(np.sqrt(2.0))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            endpoint_error(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))
