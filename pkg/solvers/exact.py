"""
The exact algorithm: alternate between maximising the likelihood over the
flows M, the closed-form update of π, and the (s, β) target function, until
the relative change of the likelihood drops below ε.
"""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config.settings import SolverConfig
from model.geo import NeighborSets, RegionSet
from model.likelihood import (
    M_MIN,
    PI_MAX,
    FlowObjective,
    ModelParams,
    flow_coefficients,
    segment_logsumexp,
    validate_counts,
)
from model.scaling import descale_flows
from optim.minimize import BoxSpec, OptimReport, minimize_box, minimize_scalar_bounded
from solvers.base import BaseSolver, FitResult, FlowProblem, IterationOutcome, prepare_problem

logger = logging.getLogger(__name__)

DEFAULT_PI = 0.02
DEFAULT_S = 0.02
BETA_SCALE = 50.0
S_FLOOR = 1e-12
# lower bound for π in the moving start; π = 0 is a fixed point of the update
MOVING_PI_FLOOR = 1e-3


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "static"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("static", "static-jittered", "moving"):
            raise ValueError(f"Unknown initialisation {self.kind!r}")
        if (self.kind == "static-jittered") != (self.seed is not None):
            raise ValueError("A seed is required for, and only for, static-jittered initialisation")


@dataclass(frozen=True)
class FlowStatistics:
    """Sufficient statistics of the flows for the (s, β) target function."""

    A: np.ndarray  # off-diagonal inflow per region
    B: np.ndarray  # off-diagonal outflow per region
    D: float  # distance-weighted off-diagonal flow


def default_params(n: int, d: np.ndarray) -> ModelParams:
    """π_i = s_i = 0.02 and β = 50 / max(d)."""
    largest = float(np.max(d)) if d.size else 0.0
    beta = BETA_SCALE / largest if largest > 0 else 0.0
    return ModelParams(np.full(n, DEFAULT_PI), np.full(n, DEFAULT_S), beta)


def init_static(
    N: np.ndarray,
    gamma: NeighborSets,
    strategy: InitStrategy,
    d: np.ndarray,
) -> Tuple[np.ndarray, ModelParams]:
    """
    Static initial guess: nobody moves. With 'static-jittered', every
    admissible entry gets an extra δ_tij ~ U[0, N_ti) from the strategy's seed.

    Returns:
        (M, default ModelParams)
    """
    N = validate_counts(N)
    steps = N.shape[0] - 1
    values = np.zeros((steps, gamma.n_active))
    values[:, gamma.diagonal] = N[:-1][:, gamma.rows[gamma.diagonal]]

    if strategy.kind == "static-jittered":
        rng = np.random.default_rng(strategy.seed)
        values += rng.uniform(0.0, 1.0, size=values.shape) * N[:-1][:, gamma.rows]

    return gamma.scatter(values), default_params(gamma.n, d)


def init_moving(N: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """
    Moving initial guess: stayers on the diagonal, and |N_ti - N_{t+1,i}|
    spread evenly over the region's destinations.
    """
    N = validate_counts(N)
    steps = N.shape[0] - 1
    destinations = gamma.destination_counts()
    change = np.abs(np.diff(N, axis=0))

    stuck = np.flatnonzero((destinations == 0) & np.any(change > 0, axis=0))
    if stuck.size:
        logger.warning(
            "Regions %s change count but have no destination; their outflow is left at 0",
            stuck.tolist(),
        )

    per_destination = np.divide(
        change, destinations[None, :], out=np.zeros_like(change), where=destinations[None, :] > 0
    )
    values = np.zeros((steps, gamma.n_active))
    values[:, gamma.diagonal] = N[:-1][:, gamma.rows[gamma.diagonal]]
    values[:, gamma.offdiag] = per_destination[:, gamma.rows[gamma.offdiag]]
    return gamma.scatter(values)


def departure_probabilities(values: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """π_i = Σ_t Σ_{j≠i} M_tij / Σ_t Σ_j M_tij from admissible-entry flows."""
    totals = values.sum(axis=0)
    leaving = np.bincount(gamma.rows[gamma.offdiag], weights=totals[gamma.offdiag], minlength=gamma.n)
    present = np.bincount(gamma.rows, weights=totals, minlength=gamma.n)

    empty = present <= 0
    if np.any(empty):
        logger.warning("No flow out of regions %s; their departure probability is set to 0",
                       np.flatnonzero(empty).tolist())
    pi = np.divide(leaving, present, out=np.zeros(gamma.n), where=~empty)
    return np.clip(pi, 0.0, PI_MAX)


def update_pi(M: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """Closed-form π update for a dense (T-1)×n×n flow tensor."""
    return departure_probabilities(gamma.gather(np.asarray(M, dtype=float)), gamma)


def flow_statistics(values: np.ndarray, d: np.ndarray, gamma: NeighborSets) -> FlowStatistics:
    off = gamma.offdiag
    totals = values.sum(axis=0)[off]
    rows, cols = gamma.rows[off], gamma.cols[off]
    return FlowStatistics(
        A=np.bincount(cols, weights=totals, minlength=gamma.n),
        B=np.bincount(rows, weights=totals, minlength=gamma.n),
        D=float(np.sum(d[rows, cols] * totals)),
    )


class DecayTarget:
    """
    f(s, β) = Σ_i A_i log s_i - Σ_i B_i log Σ_{k∈Γ_i\\{i}} s_k e^{-β d_ik} - β D,
    the only part of the likelihood that depends on s and β.
    """

    def __init__(self, stats: FlowStatistics, d: np.ndarray, gamma: NeighborSets):
        self.stats = stats
        self.n = gamma.n
        off = gamma.offdiag
        self.rows = gamma.rows[off]
        self.cols = gamma.cols[off]
        self.dist = d[self.rows, self.cols]
        self.outflow = stats.B > 0

    def log_normalizers(self, s: np.ndarray, beta: float) -> np.ndarray:
        return segment_logsumexp(np.log(s[self.cols]) - beta * self.dist, self.rows, self.n)

    def value(self, s: np.ndarray, beta: float) -> float:
        log_z = self.log_normalizers(s, beta)
        gathering = float(np.sum(self.stats.A * np.log(s)))
        spreading = float(np.sum(self.stats.B[self.outflow] * log_z[self.outflow]))
        return gathering - spreading - beta * self.stats.D

    def s_step(self, s: np.ndarray, beta: float) -> np.ndarray:
        """
        Fixed-point update s_i = A_i / Σ_k C_k e^{-β d_ki} with
        C_k = B_k / Σ_{j∈Γ_k\\{k}} s_j e^{-β d_kj} at the current s,
        followed by max-normalisation.
        """
        log_z = self.log_normalizers(s, beta)
        use = self.outflow[self.rows]
        weights = self.stats.B[self.rows[use]] * np.exp(
            -beta * self.dist[use] - log_z[self.rows[use]]
        )
        denominator = np.bincount(self.cols[use], weights=weights, minlength=self.n)

        updated = np.where(denominator > 0, self.stats.A / np.where(denominator > 0, denominator, 1.0), s)
        if updated.max() <= 0:
            return s
        return np.maximum(updated / updated.max(), S_FLOOR)

    def best_beta(self, s: np.ndarray, bounds: Tuple[float, float]) -> float:
        return minimize_scalar_bounded(lambda beta: -self.value(s, beta), bounds[0], bounds[1])


def _state_key(s: np.ndarray, beta: float) -> str:
    rounded = np.round(s, 10) + 0.0  # drop negative zeros
    return hashlib.sha1(rounded.tobytes() + np.float64(round(beta, 12)).tobytes()).hexdigest()


def optimize_s_beta(
    stats: FlowStatistics,
    d: np.ndarray,
    gamma: NeighborSets,
    beta_bounds: Tuple[float, float],
    s0: np.ndarray,
    beta0: float,
    inner_tol: float = 1e-8,
    cycle_window: int = 50,
    max_iter: int = 500,
) -> Tuple[np.ndarray, float, bool]:
    """
    Alternate the closed-form s update, max-normalisation and a bounded Brent
    search for β until f stalls or a state repeats within `cycle_window`.

    Returns:
        (s, β, cycle_detected). The best (s, β) seen is returned, so f never
        decreases relative to the starting point. Without any off-diagonal
        flow the inputs come back as given, s0 included.
    """
    if stats.B.sum() <= 0:
        logger.warning("All off-diagonal flows are zero; s and beta are left unchanged")
        return np.array(s0, dtype=float), float(beta0), False

    s = np.maximum(np.asarray(s0, dtype=float) / np.max(s0), S_FLOOR)
    beta = float(np.clip(beta0, *beta_bounds))

    target = DecayTarget(stats, d, gamma)
    best_value = previous = target.value(s, beta)
    best = (s, beta)
    recent = deque(maxlen=cycle_window)
    cycle = False

    for iteration in range(max_iter):
        s = target.s_step(s, beta)
        beta = target.best_beta(s, beta_bounds)
        value = target.value(s, beta)

        if value > best_value:
            best_value, best = value, (s, beta)
        if abs(value - previous) / max(1.0, abs(previous)) < inner_tol:
            break

        key = _state_key(s, beta)
        if key in recent:
            cycle = True
            logger.warning("(s, beta) update entered a closed loop after %d iterations", iteration + 1)
            break
        recent.append(key)
        previous = value

    return best[0], best[1], cycle


def update_s_beta(
    M: np.ndarray,
    d: np.ndarray,
    gamma: NeighborSets,
    beta_bounds: Tuple[float, float],
    params: ModelParams,
    inner_tol: float = 1e-8,
    cycle_window: int = 50,
    max_iter: int = 500,
) -> Tuple[np.ndarray, float, bool]:
    """
    Maximise f over (s, β) for a dense flow tensor.

    Args:
        M: (T-1)×n×n flows
        d: Distance matrix
        gamma: Neighbour sets
        beta_bounds: Search interval for β
        params: Current parameters; their s and β start the iteration
        inner_tol: Relative change of f that ends the iteration
        cycle_window: Number of recent states checked for repeats
        max_iter: Iteration cap

    Returns:
        (s with max(s) = 1, β, cycle_detected)
    """
    values = gamma.gather(np.asarray(M, dtype=float))
    stats = flow_statistics(values, d, gamma)
    return optimize_s_beta(
        stats, d, gamma, beta_bounds, params.s, params.beta, inner_tol, cycle_window, max_iter
    )


def maximize_flows(
    problem: FlowProblem,
    values: np.ndarray,
    params: ModelParams,
    tol: float,
    max_iter: int,
    gtol: float = 1e-5,
) -> Tuple[np.ndarray, OptimReport]:
    """Maximise the penalised likelihood over the admissible flows with (π, s, β) fixed."""
    objective = FlowObjective(problem.N, problem.lam, problem.gamma,
                              flow_coefficients(params, problem.d, problem.gamma))
    x, report = minimize_box(
        objective.negated,
        np.maximum(values, M_MIN).ravel(),
        BoxSpec.floor(objective.size, M_MIN),
        tol=tol,
        max_iter=max_iter,
        gtol=gtol,
    )
    if report.reason != "converged":
        logger.debug("M-step ended with %s: %s", report.reason, report.message)
    return x.reshape(values.shape), report


def penalised_breakdown(problem: FlowProblem, values: np.ndarray, params: ModelParams):
    objective = FlowObjective(problem.N, problem.lam, problem.gamma,
                              flow_coefficients(params, problem.d, problem.gamma))
    return objective.breakdown(values)


class ExactSolver(BaseSolver):
    """Three-way alternating maximisation over M, π and (s, β)."""

    name = "exact"

    def iterate(self, problem: FlowProblem, state: Dict[str, Any]) -> IterationOutcome:
        config = self.config
        params: ModelParams = state["params"]

        values, report = maximize_flows(
            problem, state["values"], params, config.m_tol, config.max_m_iter, config.m_gtol
        )
        pi = departure_probabilities(values, problem.gamma)
        s, beta, cycle = optimize_s_beta(
            flow_statistics(values, problem.d, problem.gamma),
            problem.d,
            problem.gamma,
            problem.beta_bounds,
            params.s,
            params.beta,
            config.inner_tol,
            config.cycle_window,
            config.max_inner,
        )

        params = ModelParams(pi, s, beta)
        state["values"] = values
        state["params"] = params
        breakdown = penalised_breakdown(problem, values, params)
        # a detected cycle sends the loop back to the M-step before judging convergence
        return IterationOutcome(
            value=breakdown.total,
            breakdown=breakdown,
            settled=not cycle,
            notes={"beta": beta, "cycle": cycle, "m_step": report.reason},
        )


def moving_params(M0: np.ndarray, problem: FlowProblem) -> ModelParams:
    """
    Parameters matching the moving guess: π is the closed-form update on M0,
    kept at or above MOVING_PI_FLOOR; s and β are the defaults.
    """
    defaults = default_params(problem.n, problem.d)
    pi = np.maximum(update_pi(M0, problem.gamma), MOVING_PI_FLOOR)
    return ModelParams(pi, defaults.s, defaults.beta)


def initial_state(problem: FlowProblem, init: InitStrategy) -> Dict[str, Any]:
    if init.kind == "moving":
        M0 = init_moving(problem.N, problem.gamma)
        params = moving_params(M0, problem)
    else:
        M0, params = init_static(problem.N, problem.gamma, init, problem.d)
    return {"values": np.maximum(problem.gamma.gather(M0), M_MIN), "params": params}


def fit_exact(
    N: np.ndarray,
    regions: RegionSet,
    config: SolverConfig,
    init: InitStrategy = InitStrategy(),
) -> FitResult:
    """
    Fit flows, departure probabilities, gathering scores and β with the exact algorithm.

    Args:
        N: T×n count panel, columns in the order of `regions`
        regions: Region set with centroids
        config: Solver settings
        init: Initial guess strategy

    Returns:
        FitResult with flows on the original (unscaled) population scale
    """
    problem = prepare_problem(N, regions, config)
    state = initial_state(problem, init)
    initial = penalised_breakdown(problem, state["values"], state["params"])
    logger.info("exact fit: n=%d, T=%d, active pairs=%d, initial L=%.10g",
                problem.n, problem.N.shape[0], problem.gamma.n_active, initial.total)

    solver = ExactSolver(config)
    outcomes, termination, iterations = solver.run_loop(
        problem, state, initial.total, config.epsilon, config.max_outer
    )

    M = descale_flows(problem.gamma.scatter(state["values"]), problem.plan)
    return FitResult(
        M=M,
        params=state["params"].normalized(),
        trace=[outcome.breakdown for outcome in outcomes],
        termination=termination,
        iterations=iterations,
        plan=problem.plan,
        history={
            "beta": [outcome.notes["beta"] for outcome in outcomes],
            "cycle": [outcome.notes["cycle"] for outcome in outcomes],
            "m_step": [outcome.notes["m_step"] for outcome in outcomes],
        },
    )
