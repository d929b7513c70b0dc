"""
Synthetic count panels with known ground-truth flows.

Scenarios fix π, s, β and the cutoff; `simulate` moves people between regions
with one multinomial draw per region and step, so the true flow tensor and the
observed counts are consistent by construction.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from model.errors import FlowInputError
from model.geo import RegionSet, build_distance_matrix, neighbor_sets
from model.likelihood import ModelParams, transition_matrix

logger = logging.getLogger(__name__)

GRID_POPULATION = 1e6
GRID_CENTRAL_PI = 0.1
# region index -> gathering score; every other grid region has s = 1
GRID_ELEVATED_S = {1: 2.0, 3: 3.0, 5: 4.0, 8: 5.0}
RING_CELLS = 15
RING_RADIUS = 0.8
SCENARIO_KEYS = ("regions", "pi", "s", "beta", "cutoff", "N0", "steps")


@dataclass
class ScenarioSpec:
    """Everything `simulate` needs; serialisable to a JSON document."""

    regions: RegionSet
    pi: np.ndarray
    s: np.ndarray
    beta: float
    cutoff: float
    N0: np.ndarray
    steps: int
    noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.N0 = np.asarray(self.N0, dtype=float)
        n = self.regions.n
        for name in ("pi", "s", "N0"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}, got shape {getattr(self, name).shape}")
        if np.any(self.N0 < 0) or not np.array_equal(self.N0, np.round(self.N0)):
            raise ValueError("Initial counts must be non-negative integers")
        if self.steps < 1:
            raise ValueError(f"A scenario needs at least one step, got {self.steps}")
        if self.noise_fraction < 0:
            raise ValueError(f"noise_fraction must be >= 0, got {self.noise_fraction}")
        if not self.cutoff > 0:
            raise ValueError(f"Cutoff must be positive, got {self.cutoff}")

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.pi, self.s, self.beta)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regions": {"ids": list(self.regions.ids), "coords": self.regions.coords.tolist()},
            "pi": self.pi.tolist(),
            "s": self.s.tolist(),
            "beta": self.beta,
            "cutoff": self.cutoff,
            "N0": self.N0.tolist(),
            "steps": self.steps,
            "noise_fraction": self.noise_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioSpec":
        """
        Rebuild a scenario written by `to_dict`.

        Raises:
            FlowInputError: On a missing key or a value of the wrong type
        """
        if not isinstance(data, dict):
            raise FlowInputError(f"A scenario must be a JSON object, got {type(data).__name__}")
        missing = [key for key in SCENARIO_KEYS if key not in data]
        if missing:
            raise FlowInputError(f"Scenario is missing key(s) {missing}")
        layout = data["regions"]
        if not isinstance(layout, dict) or not {"ids", "coords"} <= set(layout):
            raise FlowInputError("Scenario 'regions' must hold 'ids' and 'coords'")
        try:
            return cls(
                regions=RegionSet(layout["ids"], layout["coords"]),
                pi=np.asarray(data["pi"], dtype=float),
                s=np.asarray(data["s"], dtype=float),
                beta=float(data["beta"]),
                cutoff=float(data["cutoff"]),
                N0=np.asarray(data["N0"], dtype=float),
                steps=int(data["steps"]),
                noise_fraction=float(data.get("noise_fraction", 0.0)),
                seed=int(data.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise FlowInputError(f"Invalid scenario: {exc}") from exc


@dataclass
class SyntheticTruth:
    """Observed counts N (T×n) and true flows M_true ((T-1)×n×n), both integer-valued."""

    N: np.ndarray
    M_true: np.ndarray
    spec: ScenarioSpec


def _perturb(counts: np.ndarray, fraction: float, seed: int, t: int) -> np.ndarray:
    """Add or remove up to fraction·N people per region, never going below zero."""
    n = counts.shape[0]
    noisy = np.empty(n)
    for i in range(n):
        rng = np.random.default_rng([seed, 1, t, i])
        noisy[i] = counts[i] + rng.uniform(-fraction * counts[i], fraction * counts[i])
    return np.maximum(np.round(noisy), 0.0)


def simulate(spec: ScenarioSpec) -> SyntheticTruth:
    """
    Move people for `spec.steps` steps.

    Each region's population (after the optional noise) is split over its
    neighbour set with one multinomial draw using θ. The draw for step t and
    region i uses its own generator seeded with (seed, t, i), so the outcome
    does not depend on iteration order.

    Args:
        spec: Scenario definition

    Returns:
        SyntheticTruth; N_t is the count observed before that step's noise

    Raises:
        FlowModelError: If a region with π_i > 0 has no destination under the cutoff
    """
    d = build_distance_matrix(spec.regions)
    gamma = neighbor_sets(d, spec.cutoff)
    theta = transition_matrix(spec.params, d, gamma)

    n = spec.regions.n
    N = np.zeros((spec.steps + 1, n))
    M = np.zeros((spec.steps, n, n))
    N[0] = spec.N0

    for t in range(spec.steps):
        movers = N[t] if spec.noise_fraction == 0 else _perturb(N[t], spec.noise_fraction, spec.seed, t)
        for i in range(n):
            destinations = gamma[i]
            probabilities = theta[i, destinations]
            probabilities = probabilities / probabilities.sum()
            rng = np.random.default_rng([spec.seed, 0, t, i])
            M[t, i, destinations] = rng.multinomial(int(movers[i]), probabilities)
        N[t + 1] = M[t].sum(axis=0)
        logger.debug("simulated step %d: %d people, %d moved", t, int(N[t + 1].sum()),
                     int(M[t].sum() - np.trace(M[t])))

    return SyntheticTruth(N=N, M_true=M, spec=spec)


def make_benchmark_grid(seed: int = 0) -> ScenarioSpec:
    """
    3×3 grid of unit-spaced regions (width 2 between outermost centroids),
    10^6 people each, K = 2, β = 1. The centre leaves with probability 0.1,
    the others with U[0.01, 0.02]; four regions have raised gathering scores.
    """
    xs = np.array([-1.0, 0.0, 1.0])
    coords = [(x, y) for y in xs for x in xs]
    regions = RegionSet([f"g{k}" for k in range(9)], coords)

    rng = np.random.default_rng(seed)
    pi = rng.uniform(0.01, 0.02, size=9)
    pi[4] = GRID_CENTRAL_PI
    s = np.ones(9)
    for index, score in GRID_ELEVATED_S.items():
        s[index] = score

    return ScenarioSpec(
        regions=regions,
        pi=pi,
        s=s,
        beta=1.0,
        cutoff=2.0,
        N0=np.full(9, GRID_POPULATION),
        steps=1,
        seed=seed,
    )


def make_benchmark_ring(
    nu: float,
    steps: int = 3,
    noise_fraction: float = 0.0,
    seed: int = 0,
) -> ScenarioSpec:
    """
    225 cells on a regular grid covering [-1, 1]², K = 1.5, β = 1.

    People are concentrated on a ring of radius 0.8, gathering scores peak at
    the centre, and the departure probability is proportional to the initial
    population, reaching 0.1 in the densest cell.

    Args:
        nu: Population scale of the densest cells
        steps: Number of transitions to simulate
        noise_fraction: Relative count noise per step (the benchmark study uses 0.1)
        seed: Simulation seed
    """
    if not nu > 0:
        raise ValueError(f"Population scale must be positive, got {nu}")

    centres = -1.0 + (np.arange(RING_CELLS) + 0.5) * 2.0 / RING_CELLS
    xx, yy = np.meshgrid(centres, centres)
    x, y = xx.ravel(), yy.ravel()
    r = np.hypot(x, y)

    N0 = np.round(nu * np.exp(-((r - RING_RADIUS) ** 2)))
    regions = RegionSet([f"c{k:03d}" for k in range(x.size)], np.column_stack([x, y]))
    return ScenarioSpec(
        regions=regions,
        pi=0.1 * N0 / N0.max(),
        s=np.exp(-4.0 * r ** 2),
        beta=1.0,
        cutoff=1.5,
        N0=N0,
        steps=steps,
        noise_fraction=noise_fraction,
        seed=seed,
    )


def scenario_by_name(name: str, population: Optional[float] = None, steps: int = 3,
                     noise_fraction: float = 0.0, seed: int = 0) -> ScenarioSpec:
    """Built-in benchmarks addressable from the command line: 'grid' or 'ring'."""
    if name == "grid":
        return make_benchmark_grid(seed)
    if name == "ring":
        return make_benchmark_ring(population or 1e4, steps, noise_fraction, seed)
    raise ValueError(f"Unknown benchmark {name!r}; use 'grid' or 'ring'")
