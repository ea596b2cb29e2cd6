"""Metric arithmetic against pinned reference confusion tables and algebraic laws."""

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from welfare_vision.metrics import (
    ConfusionMatrix,
    MetricsReport,
    RegressionPairs,
    UndefinedMetricError,
    accuracy,
    classification_summary,
    confusion,
    fbeta,
    precision,
    r_squared,
    recall,
    rmse,
)

# reference confusion counts for the two classifier validation sets
UNIFORM_CM = ConfusionMatrix(tn=40, fp=9, fn=5, tp=36)
BY_GROUP_CM = ConfusionMatrix(tn=71, fp=18, fn=5, tp=79)


class TestReferenceRows:
    def test_uniform_matrix_chain(self):
        assert accuracy(UNIFORM_CM) == pytest.approx(0.844444, abs=1e-5)
        assert precision(UNIFORM_CM) == pytest.approx(0.800000, abs=1e-5)
        assert recall(UNIFORM_CM) == pytest.approx(0.878049, abs=1e-5)
        assert fbeta(precision(UNIFORM_CM), recall(UNIFORM_CM), 0.8) == pytest.approx(
            0.828748, abs=1e-5
        )

    def test_by_group_matrix_chain(self):
        assert accuracy(BY_GROUP_CM) == pytest.approx(0.867052, abs=1e-5)
        assert precision(BY_GROUP_CM) == pytest.approx(0.814433, abs=1e-5)
        assert recall(BY_GROUP_CM) == pytest.approx(0.940476, abs=1e-5)
        assert fbeta(precision(BY_GROUP_CM), recall(BY_GROUP_CM), 0.8) == pytest.approx(
            0.859379, abs=1e-5
        )

    def test_fbeta_epoch_row(self):
        assert fbeta(0.795455, 0.853659, 0.8) == pytest.approx(0.817198, abs=1e-5)

    def test_totals_match_validation_sizes(self):
        assert UNIFORM_CM.total == 90
        assert BY_GROUP_CM.total == 173


class TestRmse:
    def test_identity_is_zero(self):
        pairs = RegressionPairs(predictions=[1.0, 2.0, 3.0], targets=[1.0, 2.0, 3.0])
        assert rmse(pairs) == 0.0

    def test_hand_arithmetic(self):
        pairs = RegressionPairs(predictions=[0.0, 2.0], targets=[0.0, 0.0])
        assert rmse(pairs) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            RegressionPairs(predictions=[], targets=[])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            RegressionPairs(predictions=[1.0], targets=[1.0, 2.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            RegressionPairs(predictions=[math.nan], targets=[1.0])


class TestRSquared:
    def test_identity_is_one(self):
        pairs = RegressionPairs(predictions=[1.0, 2.0, 3.0], targets=[1.0, 2.0, 3.0])
        assert r_squared(pairs) == pytest.approx(1.0, abs=1e-12)

    def test_mean_prediction_is_zero(self):
        targets = [1.0, 2.0, 3.0, 6.0]
        mean = sum(targets) / len(targets)
        pairs = RegressionPairs(predictions=[mean] * 4, targets=targets)
        assert r_squared(pairs) == pytest.approx(0.0, abs=1e-12)

    def test_constant_targets_undefined(self):
        pairs = RegressionPairs(predictions=[1.0, 2.0], targets=[3.0, 3.0])
        with pytest.raises(UndefinedMetricError):
            r_squared(pairs)

    def test_shuffled_predictions_at_most_zero_in_expectation(self):
        # oracle: permuting targets against themselves gives E[R^2] <= 0
        rng = random.Random(123)
        targets = [rng.uniform(3.0, 9.0) for _ in range(60)]
        total = 0.0
        trials = 1000
        for _ in range(trials):
            shuffled = targets[:]
            rng.shuffle(shuffled)
            total += r_squared(RegressionPairs(predictions=shuffled, targets=targets))
        assert total / trials <= 0.0

    def test_cross_identity_with_rmse(self):
        rng = random.Random(7)
        targets = [rng.uniform(2.0, 8.0) for _ in range(40)]
        preds = [t + rng.gauss(0.0, 0.5) for t in targets]
        pairs = RegressionPairs(predictions=preds, targets=targets)
        mean = sum(targets) / len(targets)
        sst = sum((t - mean) ** 2 for t in targets)
        identity = 1.0 - rmse(pairs) ** 2 * len(targets) / sst
        assert r_squared(pairs) == pytest.approx(identity, abs=1e-10)


class TestConfusion:
    def test_counts_by_cell(self):
        cm = confusion([0, 1, 1, 0, 1], [0, 1, 0, 1, 1])
        assert cm == ConfusionMatrix(tn=1, fp=1, fn=1, tp=2)

    def test_all_correct_two_samples(self):
        assert confusion([0, 1], [0, 1]) == ConfusionMatrix(tn=1, fp=0, fn=0, tp=1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0])

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            confusion([0, 2], [0, 1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            confusion([], [])

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(tn=-1, fp=0, fn=0, tp=1)

    def test_normalized_rows_sum_to_one(self):
        for cm in (UNIFORM_CM, BY_GROUP_CM, ConfusionMatrix(5, 5, 5, 5)):
            rows = cm.normalized_rows()
            for row in rows:
                assert sum(row) == pytest.approx(1.0, abs=1e-9)

    def test_normalized_zero_row_errors(self):
        with pytest.raises(UndefinedMetricError):
            ConfusionMatrix(tn=0, fp=0, fn=1, tp=1).normalized_rows()


class TestDerivedRates:
    def test_perfect_matrix(self):
        cm = ConfusionMatrix(tn=10, fp=0, fn=0, tp=10)
        assert accuracy(cm) == 1.0
        assert precision(cm) == 1.0
        assert recall(cm) == 1.0

    def test_precision_undefined_without_predicted_positives(self):
        cm = ConfusionMatrix(tn=5, fp=0, fn=3, tp=0)
        with pytest.raises(UndefinedMetricError):
            precision(cm)

    def test_recall_undefined_without_actual_positives(self):
        cm = ConfusionMatrix(tn=5, fp=3, fn=0, tp=0)
        with pytest.raises(UndefinedMetricError):
            recall(cm)

    def test_fbeta_undefined_at_origin(self):
        with pytest.raises(UndefinedMetricError):
            fbeta(0.0, 0.0, 0.8)

    def test_fbeta_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            fbeta(0.5, 0.5, 0.0)

    def test_summary_maps_undefined_to_none(self):
        summary = classification_summary(ConfusionMatrix(tn=5, fp=0, fn=3, tp=0))
        assert summary["precision_score"] is None
        assert summary["fbeta_score"] is None
        assert summary["recall_score"] == 0.0
        assert summary["accuracy"] == pytest.approx(5 / 8)


@given(
    p=st.floats(min_value=0.01, max_value=1.0),
    r=st.floats(min_value=0.01, max_value=1.0),
)
@settings(max_examples=200, deadline=None)
def test_fbeta_at_beta_one_is_harmonic_mean(p, r):
    assert fbeta(p, r, 1.0) == pytest.approx(2 * p * r / (p + r), rel=1e-12)


@given(
    p=st.floats(min_value=0.0, max_value=1.0),
    r=st.floats(min_value=0.0, max_value=1.0),
    beta=st.floats(min_value=0.05, max_value=5.0),
)
@settings(max_examples=300, deadline=None)
def test_fbeta_bounded_by_unit_interval(p, r, beta):
    if p == 0.0 and r == 0.0:
        return
    assert 0.0 <= fbeta(p, r, beta) <= 1.0


@given(
    tn=st.integers(min_value=0, max_value=500),
    fp=st.integers(min_value=0, max_value=500),
    fn=st.integers(min_value=0, max_value=500),
    tp=st.integers(min_value=0, max_value=500),
)
@settings(max_examples=300, deadline=None)
def test_rates_bounded_whenever_defined(tn, fp, fn, tp):
    if tn + fp + fn + tp == 0:
        return
    cm = ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)
    assert 0.0 <= accuracy(cm) <= 1.0
    if tp + fp > 0:
        assert 0.0 <= precision(cm) <= 1.0
    if tp + fn > 0:
        assert 0.0 <= recall(cm) <= 1.0


class TestMetricsReport:
    def test_round_trip_classification(self, tmp_path):
        report = MetricsReport(
            task="classification",
            n_valid=UNIFORM_CM.total,
            metrics=classification_summary(UNIFORM_CM),
            confusion=UNIFORM_CM,
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = MetricsReport.load(path)
        assert loaded.task == "classification"
        assert loaded.confusion == UNIFORM_CM
        assert loaded.metrics["accuracy"] == pytest.approx(report.metrics["accuracy"])

    def test_round_trip_regression_with_pairs(self, tmp_path):
        pairs = RegressionPairs(predictions=[1.0, 2.5, 3.25], targets=[1.5, 2.0, 3.0])
        report = MetricsReport(
            task="regression",
            n_valid=3,
            metrics={"rmse": rmse(pairs), "r2": r_squared(pairs)},
            pairs=pairs,
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = MetricsReport.load(path)
        assert loaded.pairs is not None
        assert list(loaded.pairs.predictions) == list(pairs.predictions)
        assert list(loaded.pairs.targets) == list(pairs.targets)
        payload = json.loads(path.read_text())
        assert set(payload) >= {"task", "n_valid", "metrics", "pairs_path"}
