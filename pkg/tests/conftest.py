"""Shared fixtures: small region layouts and simulated panels."""

import numpy as np
import pytest

from config.settings import SolverConfig
from data.simulator import ScenarioSpec, simulate
from model.geo import RegionSet, build_distance_matrix, neighbor_sets
from model.likelihood import ModelParams


@pytest.fixture
def line_regions():
    """Four regions one unit apart on a line."""
    return RegionSet(["a", "b", "c", "d"], [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)])


@pytest.fixture
def grid_regions():
    """3×3 unit grid, row-major from (-1, -1)."""
    xs = [-1.0, 0.0, 1.0]
    return RegionSet([f"g{k}" for k in range(9)], [(x, y) for y in xs for x in xs])


@pytest.fixture
def small_scenario(grid_regions):
    """3×3 grid, 2 steps, thousands of people per region, diagonal neighbours admitted."""
    rng = np.random.default_rng(7)
    return ScenarioSpec(
        regions=grid_regions,
        pi=rng.uniform(0.05, 0.2, size=9),
        s=rng.uniform(0.5, 2.0, size=9),
        beta=1.0,
        cutoff=1.5,
        N0=np.full(9, 5000.0),
        steps=2,
        seed=11,
    )


@pytest.fixture
def small_truth(small_scenario):
    return simulate(small_scenario)


@pytest.fixture
def small_geometry(grid_regions):
    d = build_distance_matrix(grid_regions)
    return d, neighbor_sets(d, 1.5)


@pytest.fixture
def small_config():
    return SolverConfig(cutoff=1.5, lam=10.0, epsilon=1e-6, max_outer=50)


def _random_instance(seed: int, n: int = 4, steps: int = 1):
    """Random positions, counts, flows and parameters for gradient checks."""
    rng = np.random.default_rng(seed)
    regions = RegionSet([f"r{i}" for i in range(n)], rng.uniform(0.0, 2.0, size=(n, 2)))
    d = build_distance_matrix(regions)
    gamma = neighbor_sets(d, 10.0)
    N = rng.uniform(50.0, 150.0, size=(steps + 1, n))
    values = rng.uniform(2.0, 40.0, size=(steps, gamma.n_active))
    params = ModelParams(rng.uniform(0.05, 0.3, n), rng.uniform(0.2, 1.0, n), rng.uniform(0.1, 2.0))
    return regions, d, gamma, N, values, params


@pytest.fixture
def random_instance():
    return _random_instance

