"""Metric tests: frozen benchmark counts, matching rules, window baseline."""

import json

import numpy as np
import pytest

from trajseg.geo import GpsPoint, offset_point
from trajseg.metrics import (
    CpScore,
    confusion_matrix,
    cp_score,
    evaluate_model,
    match_change_points,
    pointwise_metrics,
    render_report,
    report_to_json,
    utw_change_points,
)
from trajseg.models import Model, default_spec
from trajseg.synth import SynthConfig, generate_trips
from trajseg.trips import Trip, derive_targets

# Frozen reference counts for a five-mode run; the expected scores below
# were computed by hand from these counts and verified independently.
BENCHMARK_CONFUSION = np.array(
    [
        [232133, 6590, 13245, 3637, 1430],
        [15480, 135651, 5445, 553, 349],
        [29758, 3557, 182237, 21094, 3646],
        [8911, 1001, 14163, 109522, 3913],
        [1302, 191, 748, 1918, 136075],
    ],
    dtype=np.int64,
)


def _line_trip(n, spacing_m, cp_indices, t=None, start=(40.0, 116.0)):
    """Straight northbound track with given change points; features unused."""
    lat, lng = start
    points = []
    for i in range(n):
        ti = float(i) if t is None else float(t[i])
        points.append(GpsPoint(ti, *offset_point(lat, lng, i * spacing_m, 0.0)))
    labels = np.zeros(n, dtype=np.int64)
    for k, idx in enumerate(cp_indices):
        labels[idx:] = (k + 1) % 5
    cp_idx, cp_coords, _, _ = derive_targets(labels)
    return Trip(
        features=np.zeros((n, 3)),
        labels=labels,
        points=points,
        cp_indices=cp_idx,
        cp_coords=cp_coords,
    )


class TestBenchmarkOracle:
    def test_accuracy(self):
        m = pointwise_metrics(BENCHMARK_CONFUSION)
        assert m.accuracy == pytest.approx(0.853, abs=1e-3)

    def test_walk_row(self):
        m = pointwise_metrics(BENCHMARK_CONFUSION)
        assert m.recall[0] == pytest.approx(0.903, abs=1e-3)
        assert m.precision[0] == pytest.approx(0.807, abs=1e-3)

    def test_train_row(self):
        m = pointwise_metrics(BENCHMARK_CONFUSION)
        assert m.recall[4] == pytest.approx(0.970, abs=1e-3)
        assert m.f1[4] == pytest.approx(0.953, abs=1e-3)

    def test_remaining_classes(self):
        m = pointwise_metrics(BENCHMARK_CONFUSION)
        assert m.precision[1] == pytest.approx(0.923, abs=1e-3)
        assert m.recall[1] == pytest.approx(0.861, abs=1e-3)
        assert m.precision[2] == pytest.approx(0.844, abs=1e-3)
        assert m.recall[2] == pytest.approx(0.758, abs=1e-3)
        assert m.f1[3] == pytest.approx(0.799, abs=1e-3)

    def test_weighted_f1(self):
        m = pointwise_metrics(BENCHMARK_CONFUSION)
        assert m.weighted_f1 == pytest.approx(0.8523806258846783, abs=1e-9)


class TestPointwiseMetrics:
    def test_perfect_diagonal(self):
        m = pointwise_metrics(np.diag([10, 20, 30, 40, 50]))
        assert m.accuracy == 1.0
        assert np.all(m.precision == 1.0)
        assert np.all(m.recall == 1.0)
        assert m.weighted_f1 == 1.0

    def test_absent_class_excluded_from_weighted_f1(self):
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[0, 0] = 8
        counts[0, 1] = 2
        counts[1, 1] = 10
        m = pointwise_metrics(counts)
        assert np.isnan(m.recall[2])
        assert np.isnan(m.f1[2])
        assert m.support[2] == 0
        f0 = 2 * 1.0 * 0.8 / 1.8
        f1 = 2 * (10 / 12) * 1.0 / (10 / 12 + 1.0)
        assert m.weighted_f1 == pytest.approx((10 * f0 + 10 * f1) / 20, rel=1e-12)

    def test_present_but_never_predicted_scores_zero_f1(self):
        counts = np.array([[5, 0], [3, 0]], dtype=np.int64)
        m = pointwise_metrics(counts)
        assert np.isnan(m.precision[1])
        assert m.recall[1] == 0.0
        assert m.f1[1] == 0.0
        assert m.weighted_f1 == pytest.approx((5 * (2 * (5 / 8) / (1 + 5 / 8))) / 8)

    def test_rejects_empty_and_nonsquare(self):
        with pytest.raises(ValueError):
            pointwise_metrics(np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            pointwise_metrics(np.zeros((2, 3), dtype=np.int64))


class TestConfusionBuilder:
    def test_hand_counts(self):
        counts = confusion_matrix(
            [np.array([0, 0, 1]), np.array([2, 2])],
            [np.array([0, 1, 1]), np.array([2, 0])],
            n_classes=3,
        )
        expected = np.array([[1, 1, 0], [0, 1, 0], [1, 0, 1]])
        assert np.array_equal(counts, expected)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix([np.array([0, 1])], [np.array([0])])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix([np.array([0, 5])], [np.array([0, 1])], n_classes=3)


class TestCpScoreConventions:
    def test_both_empty_is_perfect(self):
        s = CpScore(tp=0, fp=0, fn=0)
        assert s.precision == 1.0
        assert s.recall == 1.0
        assert s.f1 == 1.0

    def test_no_predictions_with_truth(self):
        s = CpScore(tp=0, fp=0, fn=3)
        assert s.precision == 0.0
        assert s.recall == 0.0
        assert s.f1 == 0.0

    def test_predictions_with_no_truth(self):
        s = CpScore(tp=0, fp=3, fn=0)
        assert s.precision == 0.0
        assert s.recall == 0.0

    def test_ordinary_ratios(self):
        s = CpScore(tp=2, fp=1, fn=2)
        assert s.precision == pytest.approx(2 / 3)
        assert s.recall == pytest.approx(0.5)
        assert s.f1 == pytest.approx(2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))


class TestCpMatching:
    def test_within_radius_matches(self):
        trip = _line_trip(30, 50.0, [10])
        s = match_change_points(trip, np.array([11]))
        assert (s.tp, s.fp, s.fn) == (1, 0, 0)

    def test_beyond_radius_counts_both_ways(self):
        trip = _line_trip(30, 100.0, [10])
        s = match_change_points(trip, np.array([12]))
        assert (s.tp, s.fp, s.fn) == (0, 1, 1)

    def test_proposal_consumed_once(self):
        trip = _line_trip(30, 50.0, [10, 12])
        s = match_change_points(trip, np.array([11]))
        assert (s.tp, s.fp, s.fn) == (1, 0, 1)

    def test_nearest_proposal_wins(self):
        trip = _line_trip(30, 50.0, [10])
        s = match_change_points(trip, np.array([12, 11]))
        assert (s.tp, s.fp, s.fn) == (1, 1, 0)

    def test_aggregation_over_trips(self):
        a = _line_trip(30, 50.0, [10])
        b = _line_trip(30, 100.0, [10])
        s = cp_score([a, b], [np.array([11]), np.array([12])])
        assert (s.tp, s.fp, s.fn) == (1, 1, 1)

    def test_no_truth_all_proposals_are_fp(self):
        trip = _line_trip(30, 50.0, [])
        s = match_change_points(trip, np.array([5, 6]))
        assert (s.tp, s.fp, s.fn) == (0, 2, 0)


class TestUtwBaseline:
    def test_four_interior_boundaries(self):
        trip = _line_trip(61, 5.0, [30], t=np.arange(61) * 10.0)
        idx = utw_change_points(trip, 120.0)
        assert idx.tolist() == [12, 24, 36, 48]

    def test_trip_shorter_than_window(self):
        trip = _line_trip(61, 5.0, [30], t=np.arange(61) * 10.0)
        assert utw_change_points(trip, 700.0).tolist() == []

    def test_window_of_half_duration(self):
        trip = _line_trip(61, 5.0, [30], t=np.arange(61) * 10.0)
        assert utw_change_points(trip, 300.0).tolist() == [30]

    def test_sparse_points_deduplicate(self):
        trip = _line_trip(4, 5.0, [2], t=[0.0, 50.0, 500.0, 600.0])
        assert utw_change_points(trip, 120.0).tolist() == [2]

    def test_boundary_exactly_at_end_excluded(self):
        trip = _line_trip(7, 5.0, [3], t=np.arange(7) * 100.0)
        # boundaries 200 and 400 are interior; 600 equals the end
        assert utw_change_points(trip, 200.0).tolist() == [2, 4]

    def test_rejects_bad_window(self):
        trip = _line_trip(10, 5.0, [5])
        with pytest.raises(ValueError):
            utw_change_points(trip, 0.0)


@pytest.fixture(scope="module")
def trips():
    return generate_trips(SynthConfig(seed=21, length_range=(60, 120)), 12)


@pytest.fixture(scope="module")
def model():
    return Model(default_spec("trajyolo", "mlp"), seed=0)


class TestEvaluateModel:
    def test_report_is_consistent(self, model, trips):
        report = evaluate_model(model, trips)
        assert report.n_trips == 12
        assert report.n_points == sum(t.length for t in trips)
        assert int(report.pointwise.confusion.sum()) == report.n_points
        assert 0.0 <= report.pointwise.accuracy <= 1.0
        assert report.cp.tp + report.cp.fn == sum(len(t.cp_indices) for t in trips)

    def test_json_report_deterministic_and_sorted(self, model, trips):
        a = report_to_json(evaluate_model(model, trips))
        b = report_to_json(evaluate_model(model, trips))
        assert a == b
        assert a.endswith("\n")
        parsed = json.loads(a)
        assert list(parsed) == sorted(parsed)
        assert parsed["n_trips"] == 12

    def test_render_mentions_all_modes(self, model, trips):
        text = render_report(evaluate_model(model, trips))
        for name in ("Walk", "Bike", "Bus", "Car", "Train"):
            assert name in text
        assert "Accuracy" in text

    def test_empty_trip_set_rejected(self, model):
        with pytest.raises(ValueError):
            evaluate_model(model, [])
