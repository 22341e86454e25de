"""Tests for matching, AP, TP errors and NDS."""

import numpy as np
import pytest

from panoattn.errors import ArgumentError
from panoattn.metrics import (
    angle_diff,
    average_precision,
    calc_ap,
    compute_nds,
    cummean,
    evaluate,
    format_report,
    match_center_distance,
    nds_score,
    scale_iou,
)
from panoattn.queries import CLASS_NAMES, Detection, DetectionSet

CAR = CLASS_NAMES.index("car")
CONE = CLASS_NAMES.index("traffic_cone")
BARRIER = CLASS_NAMES.index("barrier")


def box(x, y, conf=1.0, class_id=CAR, yaw=0.0, size=(2.0, 4.0, 1.5), velocity=(0.0, 0.0), source="floating", index=0):
    return Detection((x, y, 0.0), size, yaw, velocity, class_id, conf, source, index)


def gt(x, y, **kwargs):
    return box(x, y, source="gt", **kwargs)


class TestHelpers:
    def test_angle_diff_wraps(self):
        assert angle_diff(np.pi - 0.1, -np.pi + 0.1, 2 * np.pi) == pytest.approx(-0.2)
        assert abs(angle_diff(0.0, np.pi, np.pi)) == pytest.approx(0.0, abs=1e-12)

    def test_scale_iou(self):
        a = box(0, 0, size=(1.0, 1.0, 1.0))
        b = box(5, 5, size=(2.0, 1.0, 1.0))
        assert scale_iou(a, b) == pytest.approx(0.5)

    def test_cummean(self):
        np.testing.assert_allclose(cummean(np.array([1.0, np.nan, 3.0])), [1.0, 1.0, 2.0])
        np.testing.assert_array_equal(cummean(np.array([np.nan, np.nan])), [1.0, 1.0])

    def test_calc_ap_perfect(self):
        assert calc_ap(np.ones(101)) == pytest.approx(1.0)
        assert calc_ap(np.zeros(101)) == 0.0


class TestMatching:
    def test_most_confident_claims_first(self):
        preds = DetectionSet((box(0.4, 0, conf=0.3), box(0.1, 0, conf=0.9)))
        gts = DetectionSet((gt(0, 0),))
        m = match_center_distance(preds, gts, 1.0)
        assert [(i, j) for i, j, _ in m.pairs] == [(1, 0)]
        assert m.unmatched_preds == (0,)
        assert m.unmatched_gts == ()

    def test_distance_is_strict(self):
        m = match_center_distance(DetectionSet((box(1.0, 0),)), DetectionSet((gt(0, 0),)), 1.0)
        assert m.pairs == ()

    def test_class_must_agree(self):
        m = match_center_distance(DetectionSet((box(0, 0, class_id=CONE),)), DetectionSet((gt(0, 0),)), 2.0)
        assert m.unmatched_gts == (0,)

    def test_rejects_non_positive_threshold(self):
        with pytest.raises(ArgumentError):
            match_center_distance(DetectionSet(), DetectionSet(), 0.0)

    def test_greedy_is_not_optimal_assignment(self):
        # gts at x=0 and x=3. The 0.9 prediction at x=1.6 claims the nearer gt (x=3, 1.4 m),
        # so the 0.8 prediction at x=4.2 (1.2 m from x=3) finds it taken and goes unmatched,
        # although pairing 0.9 with x=0 (1.6 m) would have matched both. The 0.7 prediction
        # at x=-2.5 is 2.5 m from x=0, outside the threshold.
        preds = DetectionSet((box(-2.5, 0, conf=0.7), box(1.6, 0, conf=0.9), box(4.2, 0, conf=0.8)))
        gts = DetectionSet((gt(0, 0), gt(3, 0)))
        m = match_center_distance(preds, gts, 2.0)
        assert [(i, j) for i, j, _ in m.pairs] == [(1, 1)]
        assert m.pairs[0][2] == pytest.approx(1.4)
        assert m.unmatched_preds == (2, 0)
        assert m.unmatched_gts == (0,)

    def test_exact_overlap(self):
        m = match_center_distance(DetectionSet((box(1, 2),)), DetectionSet((gt(1, 2),)), 2.0)
        assert m.pairs == ((0, 0, 0.0),)

    def test_too_far(self):
        m = match_center_distance(DetectionSet((box(3, 0),)), DetectionSet((gt(0, 0),)), 2.0)
        assert m.pairs == ()


class TestAveragePrecision:
    def test_one_of_three_found(self):
        gts = DetectionSet((gt(0, 0), gt(20, 0), gt(0, 20)))
        preds = DetectionSet((box(0.1, 0, conf=0.9),))
        # precision 1 up to recall 1/3 → 23 grid points above recall 0.1
        assert average_precision(preds, gts, 1.0) == pytest.approx(23 / 90)

    def test_no_predictions(self):
        assert average_precision(DetectionSet(), DetectionSet((gt(0, 0),)), 1.0) == 0.0

    def test_no_ground_truth(self):
        assert average_precision(DetectionSet((box(0, 0),)), DetectionSet(), 1.0) is None

    def test_alternating_hits_and_misses(self):
        gts = DetectionSet((gt(0, 0), gt(20, 0)))
        preds = DetectionSet((
            box(0.1, 0, conf=0.9),    # TP
            box(50, 0, conf=0.8),     # FP
            box(20.1, 0, conf=0.7),   # TP
            box(-50, 0, conf=0.6),    # FP
        ))
        # anchors: recall 0.5 at precision 1, recall 1 at precision 2/3, linear between.
        # grid points 11..50 give 0.9 each; 51..100 give 0.9 - k/150, k = 1..50
        assert average_precision(preds, gts, 1.0) == pytest.approx((36 + 36.5) / 81)

    def test_top_false_positive_lowers_ap(self):
        gts = DetectionSet((gt(0, 0), gt(20, 0)))
        preds = (box(0.1, 0, conf=0.9), box(50, 0, conf=0.8), box(20.1, 0, conf=0.7), box(-50, 0, conf=0.6))
        before = average_precision(DetectionSet(preds), gts, 1.0)
        after = average_precision(DetectionSet(preds + (box(0, 60, conf=0.99),)), gts, 1.0)
        assert after == pytest.approx((8.2 + 20) / 81)
        assert after < before

    @pytest.mark.parametrize("seed", range(5))
    def test_top_false_positive_never_raises_ap(self, seed):
        rng = np.random.default_rng(seed)
        gts = DetectionSet(tuple(gt(x, y) for x, y in rng.uniform(-30, 30, size=(6, 2))))
        preds = tuple(
            box(x, y, conf=c) for (x, y), c in zip(rng.uniform(-30, 30, size=(10, 2)), rng.uniform(0.05, 0.95, 10))
        )
        near = tuple(box(g.center[0] + 0.2, g.center[1], conf=c) for g, c in zip(gts, rng.uniform(0.05, 0.95, 6)))
        base = DetectionSet(preds + near)
        worse = DetectionSet(base.detections + (box(500, 500, conf=0.99),))
        for d in (0.5, 1.0, 2.0, 4.0):
            assert average_precision(worse, gts, d) <= average_precision(base, gts, d) + 1e-12


class TestEvaluate:
    def test_perfect_predictions(self):
        gts = DetectionSet(tuple(
            gt(10.0 * i, 3.0, class_id=c, yaw=0.3 * i, velocity=(1.0, -0.5), index=i)
            for i, c in enumerate([CAR, CAR, CONE, BARRIER, CLASS_NAMES.index("bus")])
        ))
        preds = DetectionSet(tuple(
            Detection(g.center, g.size, g.yaw, g.velocity, g.class_id, 0.8, "floating", g.query_index) for g in gts
        ))
        bundle = evaluate(preds, gts)
        assert bundle.mean_ap == pytest.approx(1.0, abs=1e-12)
        assert bundle.nds == pytest.approx(1.0, abs=1e-12)
        assert bundle.maae is None
        assert bundle.maoe == pytest.approx(0.0, abs=1e-9)
        assert bundle.mave == pytest.approx(0.0, abs=1e-9)
        assert set(bundle.class_ap) == {"car", "traffic_cone", "barrier", "bus"}

    def test_translation_error_and_nds(self):
        gts = DetectionSet((gt(0, 0), gt(20, 0), gt(0, 20)))
        preds = DetectionSet((box(0.3, 0, conf=0.9),))
        bundle = evaluate(preds, gts)
        assert bundle.mate == pytest.approx(0.3)
        assert bundle.mase == pytest.approx(0.0, abs=1e-12)
        assert bundle.mean_ap == pytest.approx(23 / 90)
        expected = (5 * 23 / 90 + 0.7 + 1.0 + 1.0 + 1.0) / 9
        assert bundle.nds == pytest.approx(expected)
        assert compute_nds(bundle) == pytest.approx(bundle.nds)

    def test_cone_has_no_orientation_or_velocity(self):
        gts = DetectionSet((gt(0, 0, class_id=CONE, size=(0.4, 0.4, 1.0)),))
        preds = DetectionSet((box(0, 0, class_id=CONE, yaw=2.0, size=(0.4, 0.4, 1.0), velocity=(3.0, 0.0)),))
        bundle = evaluate(preds, gts)
        assert set(bundle.class_tp_errors["traffic_cone"]) == {"trans_err", "scale_err"}

    def test_barrier_yaw_modulo_pi(self):
        gts = DetectionSet((gt(0, 0, class_id=BARRIER),))
        preds = DetectionSet((box(0, 0, class_id=BARRIER, yaw=np.pi),))
        errs = evaluate(preds, gts).class_tp_errors["barrier"]
        assert errs["orient_err"] == pytest.approx(0.0, abs=1e-9)
        assert "vel_err" not in errs

    def test_no_ground_truth_is_worst_case(self):
        bundle = evaluate(DetectionSet((box(0, 0),)), DetectionSet())
        assert bundle.mean_ap == 0.0
        assert bundle.mate == 1.0
        assert bundle.nds == 0.0

    def test_report_lists_every_class(self):
        bundle = evaluate(DetectionSet((box(0, 0),)), DetectionSet((gt(0, 0),)))
        report = format_report(bundle)
        for name in CLASS_NAMES:
            assert name in report
        assert "mAAE: n/a" in report
        assert bundle.to_dict()["mAP"] == pytest.approx(1.0)


class TestNDS:
    def test_published_baseline_row(self):
        nds = nds_score(0.314, {
            "trans_err": 0.779, "scale_err": 0.270, "orient_err": 0.44, "vel_err": 0.882, "attr_err": 0.191,
        })
        assert nds == pytest.approx(0.4008, abs=1e-4)

    def test_errors_saturate_at_one(self):
        assert nds_score(0.0, {"trans_err": 5.0, "scale_err": 1.0}) == 0.0

    def test_missing_attribute_renormalises(self):
        errs = {"trans_err": 0.0, "scale_err": 0.0, "orient_err": 0.0, "vel_err": 0.0, "attr_err": None}
        assert nds_score(1.0, errs) == pytest.approx(1.0)
        assert nds_score(0.0, errs) == pytest.approx(4 / 9)

    def test_monotone_in_map(self):
        errs = dict.fromkeys(("trans_err", "scale_err", "orient_err", "vel_err"), 0.3)
        scores = [nds_score(m, errs) for m in (0.0, 0.2, 0.4, 0.8, 1.0)]
        assert all(a < b for a, b in zip(scores, scores[1:]))

    @pytest.mark.parametrize("key", ["trans_err", "scale_err", "orient_err", "vel_err", "attr_err"])
    def test_monotone_in_each_error(self, key):
        errs = dict.fromkeys(("trans_err", "scale_err", "orient_err", "vel_err", "attr_err"), 0.3)
        scores = [nds_score(0.4, {**errs, key: e}) for e in (0.0, 0.3, 0.6, 0.9)]
        assert all(a > b for a, b in zip(scores, scores[1:]))
        # saturated errors stop counting
        assert nds_score(0.4, {**errs, key: 1.0}) == nds_score(0.4, {**errs, key: 2.5})
