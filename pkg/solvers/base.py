"""
Abstract base class for the alternating-maximisation flow solvers.
Holds the problem definition, the fit result record and the shared
iterate-until-converged loop.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config.settings import SolverConfig
from model.geo import NeighborSets, RegionSet, build_distance_matrix, mean_positive_distance, neighbor_sets
from model.likelihood import LikelihoodBreakdown, ModelParams, validate_counts
from model.scaling import ScalePlan, apply_scaling, fixed_plan, plan_scaling

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations_reached"


@dataclass
class FlowProblem:
    """Counts, geometry and penalty weight for one fit, already scaled."""

    N: np.ndarray
    regions: RegionSet
    d: np.ndarray
    gamma: NeighborSets
    lam: float
    beta_bounds: Tuple[float, float]
    plan: ScalePlan

    @property
    def steps(self) -> int:
        return self.N.shape[0] - 1

    @property
    def n(self) -> int:
        return self.N.shape[1]


@dataclass
class FitResult:
    M: np.ndarray
    params: ModelParams
    trace: List[LikelihoodBreakdown]
    termination: str
    iterations: int
    plan: Optional[ScalePlan] = None
    history: Dict[str, List[Any]] = field(default_factory=dict)

    def summary(self) -> Dict[str, Any]:
        return {
            "termination": self.termination,
            "iterations": self.iterations,
            "beta": self.params.beta,
            "trace": [b.to_dict() for b in self.trace],
            "scale_plan": self.plan.to_dict() if self.plan else None,
            "history": self.history,
        }


@dataclass
class IterationOutcome:
    """What one pass of a solver's main loop produced."""

    value: float
    breakdown: Optional[LikelihoodBreakdown] = None
    # False asks the loop to skip the convergence test this pass (e.g. a retry)
    settled: bool = True
    notes: Dict[str, Any] = field(default_factory=dict)


def default_beta_bounds(d: np.ndarray) -> Tuple[float, float]:
    """[-10/d̄, 50/d̄] with d̄ the mean positive distance."""
    mean = mean_positive_distance(d)
    if mean == 0:
        return -10.0, 50.0
    return -10.0 / mean, 50.0 / mean


def relative_change(current: float, previous: float) -> float:
    return abs(current - previous) / max(1.0, abs(previous))


def prepare_problem(N: np.ndarray, regions: RegionSet, config: SolverConfig) -> FlowProblem:
    """
    Validate the panel, build geometry and apply the configured scaling.

    Returns:
        FlowProblem with counts multiplied by the plan's factor and λ compensated
    """
    N = validate_counts(N)
    if N.shape[1] != regions.n:
        raise ValueError(f"Counts cover {N.shape[1]} regions but {regions.n} centroids were given")

    d = build_distance_matrix(regions)
    gamma = neighbor_sets(d, config.cutoff)

    if config.scaling == "auto":
        plan = plan_scaling(N, gamma, config.target_min_flow, config.lam, config.lambda_rule)
    elif config.scaling == "factor":
        plan = fixed_plan(config.scale_factor, config.lam, config.lambda_rule)
    else:
        plan = fixed_plan(1.0, config.lam, config.lambda_rule)

    bounds = config.beta_bounds or default_beta_bounds(d)
    return FlowProblem(
        N=apply_scaling(N, plan),
        regions=regions,
        d=d,
        gamma=gamma,
        lam=plan.lam_scaled,
        beta_bounds=bounds,
        plan=plan,
    )


class BaseSolver(ABC):
    """Shared outer loop of the alternating maximisation solvers."""

    name = "base"

    def __init__(self, config: SolverConfig):
        """
        Args:
            config: Solver settings (cutoff, λ, ε, caps, seed)
        """
        self.config = config

    @abstractmethod
    def iterate(self, problem: FlowProblem, state: Dict[str, Any]) -> IterationOutcome:
        """
        Run one pass of the solver's update steps, mutating `state`.

        Returns:
            IterationOutcome whose `value` is tested for convergence
        """

    def run_loop(
        self,
        problem: FlowProblem,
        state: Dict[str, Any],
        initial_value: float,
        tolerance: float,
        max_iterations: int,
    ) -> Tuple[List[IterationOutcome], str, int]:
        """
        Iterate until the relative change of the tracked value drops below
        `tolerance` or `max_iterations` passes have run.

        Returns:
            (outcomes, termination reason, iterations used)
        """
        outcomes: List[IterationOutcome] = []
        previous = initial_value
        iterations = 0

        while iterations < max_iterations:
            iterations += 1
            outcome = self.iterate(problem, state)
            outcomes.append(outcome)

            change = relative_change(outcome.value, previous)
            logger.info(
                "%s iteration %d: value=%.10g change=%.3g%s",
                self.name, iterations, outcome.value, change,
                "" if outcome.settled else " (retry)",
            )
            if outcome.settled and change < tolerance:
                return outcomes, CONVERGED, iterations
            previous = outcome.value

        logger.warning("%s stopped after %d iterations without converging", self.name, iterations)
        return outcomes, MAX_ITERATIONS, iterations
