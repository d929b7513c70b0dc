import logging

import numpy as np
import pytest

from config.settings import SolverConfig
from data.simulator import make_benchmark_grid, simulate
from evaluation.metrics import nae
from model.geo import RegionSet, build_distance_matrix, neighbor_sets
from model.likelihood import M_MIN, FlowObjective, ModelParams, flow_coefficients
from solvers.base import CONVERGED, default_beta_bounds, prepare_problem
from solvers.exact import (
    MOVING_PI_FLOOR,
    DecayTarget,
    FlowStatistics,
    InitStrategy,
    _state_key,
    default_params,
    fit_exact,
    flow_statistics,
    init_moving,
    init_static,
    initial_state,
    maximize_flows,
    optimize_s_beta,
    update_pi,
    update_s_beta,
)


def target_at(M, d, s, beta):
    """f(s, β) written out directly from the flows."""
    off = M.sum(axis=0) * (1.0 - np.eye(len(s)))
    inflow, outflow = off.sum(axis=0), off.sum(axis=1)
    weights = np.asarray(s, dtype=float)[None, :] * np.exp(-beta * d) * (1.0 - np.eye(len(s)))
    return float(np.sum(inflow * np.log(s)) - np.sum(outflow * np.log(weights.sum(axis=1))) - beta * np.sum(d * off))


def brute_force_target(M, d, grid, betas):
    """f on a dense (s0, s1, β) grid with s2 = 1; returns the values and the best point."""
    off = M.sum(axis=0) * (1.0 - np.eye(3))
    inflow, outflow = off.sum(axis=0), off.sum(axis=1)
    s0, s1, beta = np.meshgrid(grid, grid, betas, indexing="ij")
    s = [s0, s1, np.ones_like(s0)]
    values = sum(inflow[i] * np.log(s[i]) for i in range(3)) - beta * np.sum(d * off)
    for i in range(3):
        total = sum(s[k] * np.exp(-beta * d[i, k]) for k in range(3) if k != i)
        values = values - outflow[i] * np.log(total)
    best = np.unravel_index(np.argmax(values), values.shape)
    return values, (s0[best], s1[best], beta[best])


@pytest.fixture
def pair():
    regions = RegionSet(["a", "b"], [(0.0, 0.0), (1.0, 0.0)])
    d = build_distance_matrix(regions)
    return regions, d, neighbor_sets(d, 1.0)


@pytest.fixture
def triangle():
    regions = RegionSet(["a", "b", "c"], [(0.0, 0.0), (1.0, 0.0), (0.5, np.sqrt(3) / 2)])
    d = build_distance_matrix(regions)
    return regions, d, neighbor_sets(d, 1.5)


class TestInitialGuesses:
    def test_static_puts_everyone_on_the_diagonal(self, small_truth, small_geometry):
        d, gamma = small_geometry
        M, params = init_static(small_truth.N, gamma, InitStrategy(), d)
        for t in range(M.shape[0]):
            np.testing.assert_array_equal(np.diag(M[t]), small_truth.N[t])
        assert M.sum() == pytest.approx(small_truth.N[:-1].sum())
        np.testing.assert_allclose(params.pi, 0.02)
        assert params.beta == pytest.approx(50.0 / d.max())

    def test_jitter_is_seeded_and_stays_admissible(self, small_truth, small_geometry):
        d, gamma = small_geometry
        first, _ = init_static(small_truth.N, gamma, InitStrategy("static-jittered", 3), d)
        again, _ = init_static(small_truth.N, gamma, InitStrategy("static-jittered", 3), d)
        other, _ = init_static(small_truth.N, gamma, InitStrategy("static-jittered", 4), d)
        np.testing.assert_array_equal(first, again)
        assert not np.array_equal(first, other)
        assert np.all(first[:, ~gamma.mask()] == 0)

    def test_seed_only_with_jitter(self):
        with pytest.raises(ValueError):
            InitStrategy("static-jittered")
        with pytest.raises(ValueError):
            InitStrategy("static", seed=1)
        with pytest.raises(ValueError):
            InitStrategy("random")

    def test_moving_spreads_the_change(self, pair):
        _, _, gamma = pair
        M = init_moving(np.array([[10.0, 10.0], [12.0, 8.0]]), gamma)
        np.testing.assert_array_equal(M[0], [[10.0, 2.0], [2.0, 10.0]])

    def test_moving_warns_for_isolated_regions(self, line_regions, caplog):
        gamma = neighbor_sets(build_distance_matrix(line_regions), 0.5)
        N = np.array([[5.0, 5.0, 5.0, 5.0], [6.0, 5.0, 5.0, 4.0]])
        with caplog.at_level(logging.WARNING):
            M = init_moving(N, gamma)
        assert "no destination" in caplog.text
        np.testing.assert_array_equal(M[0], np.diag(N[0]))


class TestUpdatePi:
    def test_recovers_simulated_probabilities(self):
        spec = make_benchmark_grid(seed=0)
        truth = simulate(spec)
        gamma = neighbor_sets(build_distance_matrix(spec.regions), spec.cutoff)
        np.testing.assert_allclose(update_pi(truth.M_true, gamma), spec.pi, atol=0.01)

    def test_nobody_moves(self, pair):
        _, _, gamma = pair
        M = np.array([[[7.0, 0.0], [0.0, 3.0]]])
        np.testing.assert_array_equal(update_pi(M, gamma), [0.0, 0.0])

    def test_half_leave(self, pair):
        _, _, gamma = pair
        M = np.array([[[5.0, 5.0], [2.0, 2.0]], [[1.0, 1.0], [3.0, 3.0]]])
        np.testing.assert_allclose(update_pi(M, gamma), [0.5, 0.5])

    def test_empty_region_warns(self, pair, caplog):
        _, _, gamma = pair
        M = np.array([[[0.0, 0.0], [1.0, 3.0]]])
        with caplog.at_level(logging.WARNING):
            pi = update_pi(M, gamma)
        assert pi[0] == 0.0 and pi[1] == pytest.approx(0.25)
        assert "departure probability" in caplog.text


class TestUpdateSBeta:
    def test_symmetric_flows_give_uniform_scores(self, triangle):
        _, d, gamma = triangle
        M = np.full((1, 3, 3), 4.0)
        np.fill_diagonal(M[0], 10.0)
        params = ModelParams(np.full(3, 0.3), np.array([0.2, 0.5, 1.0]), 1.0)
        s, beta, cycle = update_s_beta(M, d, gamma, default_beta_bounds(d), params)
        np.testing.assert_allclose(s, 1.0, atol=1e-3)
        assert not cycle

    @pytest.mark.parametrize("seed", range(3))
    def test_target_never_decreases(self, random_instance, seed):
        _, d, gamma, _, values, params = random_instance(seed, n=5, steps=2)
        stats = flow_statistics(values, d, gamma)
        bounds = default_beta_bounds(d)
        target = DecayTarget(stats, d, gamma)
        start = target.value(params.s / params.s.max(), float(np.clip(params.beta, *bounds)))

        s, beta, _ = optimize_s_beta(stats, d, gamma, bounds, params.s, params.beta)
        assert target.value(s, beta) >= start - 1e-9 * abs(start)
        assert s.max() == pytest.approx(1.0)
        assert bounds[0] <= beta <= bounds[1]

    def test_no_movement_leaves_parameters(self, triangle, caplog):
        _, d, gamma = triangle
        stats = FlowStatistics(A=np.zeros(3), B=np.zeros(3), D=0.0)
        with caplog.at_level(logging.WARNING):
            s, beta, cycle = optimize_s_beta(stats, d, gamma, (-5.0, 5.0), np.array([1.0, 4.0, 0.5]), 0.7)
        np.testing.assert_array_equal(s, [1.0, 4.0, 0.5])
        assert beta == 0.7 and not cycle
        assert "unchanged" in caplog.text

    def test_flows_biased_towards_one_region(self):
        regions = RegionSet(["a", "b", "c"], [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])
        d = build_distance_matrix(regions)
        gamma = neighbor_sets(d, 2.0)
        M = np.array([[[20.0, 4.0, 4.0], [1.0, 20.0, 6.0], [1.0, 2.0, 20.0]]])
        bounds = (-3.0, 3.0)
        params = ModelParams(np.full(3, 0.2), np.ones(3), 0.0)

        s, beta, _ = update_s_beta(M, d, gamma, bounds, params)
        values, (s0, s1, _) = brute_force_target(M, d, np.linspace(0.01, 1.0, 100), np.linspace(*bounds, 121))

        assert s[2] == 1.0
        assert s[0] < 1.0 and s[1] < 1.0
        assert s[0] == pytest.approx(s0, abs=0.05)
        assert s[1] == pytest.approx(s1, abs=0.05)
        assert target_at(M, d, s, beta) >= values.max() - 1e-5 * abs(values.max())

    def test_state_key_ignores_tiny_differences(self):
        s = np.array([0.3, 1.0])
        assert _state_key(s, 0.5) == _state_key(s + 1e-13, 0.5)
        assert _state_key(s, 0.5) != _state_key(s, 0.6)


class TestMaximizeFlows:
    @pytest.mark.parametrize("factor", [1.0, 1e4])
    def test_stationary_at_any_scale(self, pair, factor):
        regions, _, _ = pair
        config = SolverConfig(cutoff=1.0, scaling="factor", scale_factor=factor)
        problem = prepare_problem(np.array([[100.0, 100.0], [110.0, 90.0]]), regions, config)
        state = initial_state(problem, InitStrategy())

        values, report = maximize_flows(problem, state["values"], state["params"], config.m_tol,
                                        config.max_m_iter, config.m_gtol)
        objective = FlowObjective(problem.N, problem.lam, problem.gamma,
                                  flow_coefficients(state["params"], problem.d, problem.gamma))
        grad = objective.gradient(values)
        free = values > 10 * M_MIN
        assert np.max(np.abs(grad[free])) < 1e-3
        assert np.all(grad[~free] <= 1e-3)
        assert report.value <= -objective.breakdown(state["values"]).total


class TestInitialState:
    def test_moving_start_carries_its_own_departure_probabilities(self, small_truth, grid_regions, small_config):
        problem = prepare_problem(small_truth.N, grid_regions, small_config)
        static = initial_state(problem, InitStrategy())
        moving = initial_state(problem, InitStrategy("moving"))

        expected = np.maximum(update_pi(init_moving(problem.N, problem.gamma), problem.gamma), MOVING_PI_FLOOR)
        np.testing.assert_allclose(moving["params"].pi, expected)
        assert not np.allclose(moving["params"].pi, static["params"].pi)
        np.testing.assert_array_equal(moving["params"].s, static["params"].s)
        assert moving["params"].beta == static["params"].beta

    def test_unchanged_counts_keep_a_floor(self, pair):
        regions, _, _ = pair
        problem = prepare_problem(np.full((2, 2), 10.0), regions, SolverConfig(cutoff=1.0))
        np.testing.assert_allclose(initial_state(problem, InitStrategy("moving"))["params"].pi, MOVING_PI_FLOOR)


class TestFitExact:
    def test_likelihood_trace_is_monotone(self, small_truth, grid_regions, small_config):
        fit = fit_exact(small_truth.N, grid_regions, small_config.with_overrides(epsilon=1e-5, max_outer=200))
        totals = [b.total for b in fit.trace]
        for previous, current in zip(totals, totals[1:]):
            assert current >= previous - 1e-8 * abs(previous)
        assert fit.termination == CONVERGED
        assert fit.iterations == len(fit.trace) == len(fit.history["beta"])

    def test_result_shape_and_support(self, small_truth, grid_regions, small_config, small_geometry):
        _, gamma = small_geometry
        fit = fit_exact(small_truth.N, grid_regions, small_config)
        assert fit.M.shape == small_truth.M_true.shape
        assert np.all(fit.M[:, ~gamma.mask()] == 0)
        assert np.all(fit.M[:, gamma.mask()] > 0)
        assert fit.params.s.max() == pytest.approx(1.0)
        assert nae(fit.M, small_truth.M_true) < 0.25

    def test_auto_scaling_reports_original_scale(self, small_truth, grid_regions, small_config):
        fit = fit_exact(small_truth.N / 100.0, grid_regions,
                        small_config.with_overrides(scaling="auto", max_outer=20))
        assert fit.plan.c >= 1.0
        np.testing.assert_allclose(fit.M.sum(axis=2), small_truth.N[:-1] / 100.0, rtol=0.05)

    def test_moving_start(self, small_truth, grid_regions, small_config):
        fit = fit_exact(small_truth.N, grid_regions, small_config.with_overrides(max_outer=10),
                        InitStrategy("moving"))
        assert fit.iterations <= 10
        assert np.all(np.isfinite(fit.M))


def test_default_params_shape():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])
    params = default_params(2, d)
    np.testing.assert_allclose(params.s, 0.02)
    assert params.beta == pytest.approx(25.0)
