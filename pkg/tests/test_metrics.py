import numpy as np
import pytest

from evaluation.metrics import (
    aggregate_inout,
    conservation_cost,
    median_abs_log_ratio,
    nae,
    offdiag_nae,
    pearson,
    scaling_agreement,
    stability_report,
)
from model.errors import FlowInputError


class TestNAE:
    def test_identical(self):
        M = np.arange(8.0).reshape(2, 2, 2)
        assert nae(M, M) == 0.0

    def test_zero_estimate(self):
        M = np.arange(1.0, 9.0).reshape(2, 2, 2)
        assert nae(np.zeros_like(M), M) == 1.0

    def test_hand_computed(self):
        assert nae(np.array([5.0, 5.0]), np.array([4.0, 6.0])) == pytest.approx(0.2)

    def test_scale_invariant(self):
        rng = np.random.default_rng(0)
        truth, estimate = rng.uniform(1, 9, (2, 1, 3, 3))
        assert nae(estimate * 7, truth * 7) == pytest.approx(nae(estimate, truth))

    def test_errors(self):
        with pytest.raises(FlowInputError):
            nae(np.ones(2), np.zeros(2))
        with pytest.raises(FlowInputError):
            nae(np.ones(2), np.ones(3))


class TestOffdiagNAE:
    def test_diagonal_disagreement_ignored(self):
        truth = np.array([[[10.0, 3.0], [2.0, 10.0]]])
        estimate = truth.copy()
        estimate[0, 0, 0] = 50.0
        assert offdiag_nae(estimate, truth) == 0.0

    def test_hand_computed(self):
        truth = np.array([[[1.0, 3.0], [0.0, 1.0]]])
        estimate = np.array([[[1.0, 6.0], [0.0, 1.0]]])
        assert offdiag_nae(estimate, truth) == pytest.approx(1.0)

    def test_nobody_moves_in_truth(self):
        with pytest.raises(FlowInputError):
            offdiag_nae(np.ones((1, 2, 2)), np.eye(2)[None])


class TestStability:
    def test_identical_runs(self):
        M = np.full((1, 2, 2), 3.0)
        report = stability_report([M, M, M])
        np.testing.assert_array_equal(report.ratio, 0.0)
        assert report.fraction_below_one == 1.0

    def test_population_standard_deviation(self):
        report = stability_report([np.array([1.0]), np.array([3.0])])
        assert report.mean[0] == 2.0
        assert report.std[0] == 1.0
        assert report.ratio[0] == 0.5

    def test_zero_mean_entries_are_counted_apart(self):
        runs = [np.array([0.0, 2.0]), np.array([0.0, 4.0])]
        report = stability_report(runs)
        assert report.zero_mean_count == 1
        assert np.isnan(report.ratio[0])
        counts, _ = report.histogram(bins=5)
        assert counts.sum() == 1

    def test_invariant_under_joint_rescaling(self):
        rng = np.random.default_rng(1)
        runs = list(rng.uniform(1, 5, (4, 2, 3, 3)))
        a = stability_report(runs).ratio
        b = stability_report([run * 1000 for run in runs]).ratio
        np.testing.assert_allclose(a, b)

    def test_mask_selects_entries(self):
        runs = [np.ones((2, 3, 3)), 2 * np.ones((2, 3, 3))]
        report = stability_report(runs, mask=np.eye(3, dtype=bool))
        assert report.ratio.size == 6

    def test_needs_two_runs(self):
        with pytest.raises(FlowInputError):
            stability_report([np.ones(3)])

    def test_histogram_table(self):
        report = stability_report([np.array([1.0, 2.0]), np.array([3.0, 2.0])])
        table = report.histogram_table(bins=4)
        assert list(table.columns) == ["bin_left", "bin_right", "count"]
        assert table["count"].sum() == 2


class TestAggregateInOut:
    def test_diagonal_flows(self):
        summary = aggregate_inout(np.eye(3)[None] * 5, [0])
        np.testing.assert_array_equal(summary.outbound, 0)
        np.testing.assert_array_equal(summary.inbound, 0)

    def test_single_flow(self):
        M = np.zeros((2, 3, 3))
        M[1, 0, 2] = 7.0
        summary = aggregate_inout(M, [0, 1])
        assert summary.outbound[0] == 7.0
        assert summary.inbound[2] == 7.0
        assert aggregate_inout(M, [0]).outbound.sum() == 0

    def test_totals_balance(self):
        M = np.random.default_rng(2).uniform(0, 10, (3, 4, 4))
        summary = aggregate_inout(M, range(3))
        assert summary.outbound.sum() == pytest.approx(summary.inbound.sum())

    def test_bad_windows(self):
        with pytest.raises(FlowInputError):
            aggregate_inout(np.zeros((2, 2, 2)), [])
        with pytest.raises(FlowInputError):
            aggregate_inout(np.zeros((2, 2, 2)), [2])


class TestAgreement:
    def test_median_abs_log_ratio(self):
        assert median_abs_log_ratio(np.array([1.0, 2.0, 4.0]), np.array([1.0, 1.0, 1.0])) == pytest.approx(np.log(2))

    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        with pytest.raises(FlowInputError):
            pearson([1], [1])

    def test_scaling_agreement(self):
        a = np.array([100.0, 10.0, 0.2, 50.0])
        b = np.array([105.0, 10.4, 0.6, 80.0])
        assert scaling_agreement(a, b) == pytest.approx(0.75)


def test_conservation_cost():
    N = np.array([[3.0, 2.0], [2.0, 3.0]])
    M = np.array([[[2.0, 1.0], [0.0, 2.0]]])
    assert conservation_cost(M, N) == 0.0
    assert conservation_cost(np.zeros((1, 2, 2)), N) == pytest.approx(9 + 4 + 4 + 9)
