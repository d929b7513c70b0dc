"""
The approximate algorithm. Flows are split into inbound views X, outflow
totals Y and stayers Z that decouple the likelihood; after (X, Y, Z, π, s, β)
settle, M is recovered from a final likelihood maximisation with the fitted
parameters. The whole procedure may be repeated, feeding each recovered M
back in as the next starting point.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import xlogy

from config.settings import SolverConfig
from evaluation.metrics import nae
from model.errors import NonFiniteLikelihoodError
from model.geo import NeighborSets, RegionSet
from model.likelihood import M_MIN, PI_MAX, ModelParams, transition_matrix, validate_counts
from model.scaling import descale_flows
from optim.minimize import BoxSpec, minimize_box
from solvers.base import (
    CONVERGED,
    BaseSolver,
    FitResult,
    FlowProblem,
    IterationOutcome,
    prepare_problem,
)
from solvers.exact import (
    FlowStatistics,
    default_params,
    departure_probabilities,
    flow_statistics,
    maximize_flows,
    optimize_s_beta,
    penalised_breakdown,
)

logger = logging.getLogger(__name__)


@dataclass
class XYZState:
    """
    X_tij = M_tji (inbound view), Y_ti = Σ_{j≠i} M_tij, Z_ti = M_tii.

    X is kept as a (T-1)×E matrix in NeighborSets order: column e holds
    X_{t, cols[e], rows[e]}, i.e. the same physical flow as M_{t, rows[e], cols[e]}.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, gamma: NeighborSets) -> "XYZState":
        off = gamma.offdiag
        steps = values.shape[0]
        Y = np.zeros((steps, gamma.n))
        for t in range(steps):
            Y[t] = np.bincount(gamma.rows[off], weights=values[t, off], minlength=gamma.n)
        Z = values[:, gamma.diagonal][:, np.argsort(gamma.rows[gamma.diagonal])]
        return cls(X=values.copy(), Y=Y, Z=Z)

    @classmethod
    def from_flows(cls, M: np.ndarray, gamma: NeighborSets) -> "XYZState":
        return cls.from_values(gamma.gather(np.asarray(M, dtype=float)), gamma)

    def flow_values(self, gamma: NeighborSets) -> np.ndarray:
        """Assemble M: off-diagonal from X, diagonal from Z."""
        values = self.X.copy()
        values[:, gamma.diagonal] = self.Z[:, gamma.rows[gamma.diagonal]]
        return values

    def inbound_view(self, gamma: NeighborSets) -> np.ndarray:
        """Dense (T-1)×n×n X with X[t, i, j] = M[t, j, i]."""
        X = np.zeros((self.X.shape[0], gamma.n, gamma.n))
        X[:, gamma.cols, gamma.rows] = self.X
        return X

    def pack(self) -> np.ndarray:
        return np.concatenate([self.X.ravel(), self.Y.ravel(), self.Z.ravel()])

    @classmethod
    def unpack(cls, x: np.ndarray, steps: int, n_active: int, n: int) -> "XYZState":
        size_x = steps * n_active
        size_y = steps * n
        return cls(
            X=x[:size_x].reshape(steps, n_active),
            Y=x[size_x:size_x + size_y].reshape(steps, n),
            Z=x[size_x + size_y:].reshape(steps, n),
        )


@dataclass(frozen=True)
class OuterLoopConfig:
    """
    Feedback rounds around the approximate fit.

    With a truth tensor, rounds stop once NAE <= nae_target or NAE stops
    decreasing; otherwise they stop once max |ΔM| / max(1, M) < m_change_tol.
    """

    max_rounds: int = 1
    nae_target: Optional[float] = None
    m_change_tol: float = 1e-2

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


def expected_inflows(params: ModelParams, N: np.ndarray, d: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """μ_ij = Σ_t N_tj θ_ji, summed over the snapshots that start a step."""
    theta = transition_matrix(params, d, gamma)
    starting = N[:-1].sum(axis=0)
    return theta.T * starting[None, :]


class ApproxObjective:
    """L_approx - (λ/2) C(X, Y, Z) and its gradient on a packed (X, Y, Z) vector."""

    def __init__(self, N: np.ndarray, lam: float, gamma: NeighborSets, params: ModelParams, d: np.ndarray):
        self.N = N
        self.lam = float(lam)
        self.gamma = gamma
        self.steps = N.shape[0] - 1
        mu = expected_inflows(params, N, d, gamma)
        # X column e is X_{cols[e], rows[e]}
        self.log_mu = np.log(np.maximum(mu[gamma.cols, gamma.rows], M_MIN))
        self.log_leave = np.log(np.maximum(N[:-1] * params.pi[None, :], M_MIN))
        self.log_stay = np.log(np.maximum(N[:-1] * (1.0 - params.pi[None, :]), M_MIN))

    @property
    def size(self) -> int:
        return self.steps * (self.gamma.n_active + 2 * self.gamma.n)

    def inbound_totals(self, X: np.ndarray) -> np.ndarray:
        n = self.gamma.n
        sums = np.zeros((self.steps, n))
        for t in range(self.steps):
            sums[t] = np.bincount(self.gamma.cols, weights=X[t], minlength=n)
        return sums

    def evaluate(self, state: XYZState) -> Tuple[float, float, float]:
        """
        Returns:
            (L_approx, C, L_approx - (λ/2) C)
        """
        X, Y, Z = state.X, state.Y, state.Z
        terms = {
            "L_approx[X]": float(np.sum(X * self.log_mu[None, :] + X - xlogy(X, X))),
            "L_approx[Y]": float(np.sum(Y * self.log_leave + Y - xlogy(Y, Y))),
            "L_approx[Z]": float(np.sum(Z * self.log_stay + Z - xlogy(Z, Z))),
            "C(X,Y,Z)": float(
                np.sum((self.N[:-1] - Y - Z) ** 2) + np.sum((self.N[1:] - self.inbound_totals(X)) ** 2)
            ),
        }
        for name, value in terms.items():
            if not np.isfinite(value):
                raise NonFiniteLikelihoodError(name, value)
        value = terms["L_approx[X]"] + terms["L_approx[Y]"] + terms["L_approx[Z]"]
        cost = terms["C(X,Y,Z)"]
        return value, cost, value - 0.5 * self.lam * cost

    def gradients(self, state: XYZState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        X, Y, Z = state.X, state.Y, state.Z
        inbound_residual = self.N[1:] - self.inbound_totals(X)
        outbound_residual = self.N[:-1] - Y - Z
        grad_X = (
            self.log_mu[None, :]
            - np.log(np.maximum(X, M_MIN))
            + self.lam * inbound_residual[:, self.gamma.cols]
        )
        grad_Y = self.log_leave - np.log(np.maximum(Y, M_MIN)) + self.lam * outbound_residual
        grad_Z = self.log_stay - np.log(np.maximum(Z, M_MIN)) + self.lam * outbound_residual
        return grad_X, grad_Y, grad_Z

    def negated(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        state = XYZState.unpack(x, self.steps, self.gamma.n_active, self.gamma.n)
        _, _, total = self.evaluate(state)
        grad_X, grad_Y, grad_Z = self.gradients(state)
        return -total, -np.concatenate([grad_X.ravel(), grad_Y.ravel(), grad_Z.ravel()])


def approx_loglik_and_grad(
    state: XYZState,
    params: ModelParams,
    N: np.ndarray,
    lam: float,
    d: np.ndarray,
    gamma: NeighborSets,
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Penalised approximate log-likelihood and its gradients.

    Args:
        state: X, Y, Z (X as an E-column matrix in NeighborSets order)
        params: π, s, β
        N: T×n count panel
        lam: Penalty weight
        d: Distance matrix
        gamma: Neighbour sets

    Returns:
        (L_approx - (λ/2) C, ∂/∂X, ∂/∂Y, ∂/∂Z)
    """
    objective = ApproxObjective(validate_counts(N), lam, gamma, params, d)
    _, _, total = objective.evaluate(state)
    return (total, *objective.gradients(state))


def update_pi_approx(state: XYZState) -> np.ndarray:
    """π_i = Σ_t Y_ti / Σ_t (Y_ti + Z_ti), clamped to [0, 1 - 1e-9]."""
    leaving = state.Y.sum(axis=0)
    present = leaving + state.Z.sum(axis=0)
    empty = present <= 0
    if np.any(empty):
        logger.warning("Regions %s have no outflow or stayers; departure probability set to 0",
                       np.flatnonzero(empty).tolist())
    pi = np.divide(leaving, present, out=np.zeros_like(leaving), where=~empty)
    return np.clip(pi, 0.0, PI_MAX)


def xyz_statistics(state: XYZState, d: np.ndarray, gamma: NeighborSets) -> FlowStatistics:
    """
    (s, β) statistics of the flows assembled from the state, off-diagonal
    from X and diagonal from Z. Inflow and outflow then count the same
    movers, so Σ A = Σ B.
    """
    return flow_statistics(state.flow_values(gamma), d, gamma)


def consistent_state(state: XYZState, gamma: NeighborSets) -> XYZState:
    """Rebuild Y from the off-diagonal of X so that Y, Z and X describe one flow tensor."""
    return XYZState.from_values(state.flow_values(gamma), gamma)


class ApproxSolver(BaseSolver):
    """Steps 2-4 of the approximate algorithm as one loop pass."""

    name = "approx"

    def iterate(self, problem: FlowProblem, state: Dict[str, Any]) -> IterationOutcome:
        config = self.config
        params: ModelParams = state["params"]
        xyz: XYZState = state["xyz"]

        objective = ApproxObjective(problem.N, problem.lam, problem.gamma, params, problem.d)
        x, report = minimize_box(
            objective.negated,
            np.maximum(xyz.pack(), M_MIN),
            BoxSpec.floor(objective.size, M_MIN),
            tol=config.m_tol,
            max_iter=config.max_m_iter,
            gtol=config.m_gtol,
        )
        xyz = XYZState.unpack(x, problem.steps, problem.gamma.n_active, problem.n)

        pi = update_pi_approx(consistent_state(xyz, problem.gamma))
        s, beta, cycle = optimize_s_beta(
            xyz_statistics(xyz, problem.d, problem.gamma),
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
        state["xyz"] = xyz
        state["params"] = params

        # convergence is judged on L_approx itself
        value, cost, _ = ApproxObjective(problem.N, problem.lam, problem.gamma, params, problem.d).evaluate(xyz)
        return IterationOutcome(
            value=value,
            settled=not cycle,
            notes={"beta": beta, "cycle": cycle, "cost": cost, "xyz_step": report.reason},
        )


def initial_flows(problem: FlowProblem, config: SolverConfig) -> np.ndarray:
    """N on the diagonal, small seeded uniform values off the diagonal."""
    gamma = problem.gamma
    rng = np.random.default_rng(config.seed)
    values = np.zeros((problem.steps, gamma.n_active))
    values[:, gamma.diagonal] = problem.N[:-1][:, gamma.rows[gamma.diagonal]]
    off = gamma.offdiag
    values[:, off] = rng.uniform(0.0, config.init_offdiag, size=(problem.steps, int(off.sum())))
    return np.maximum(values, M_MIN)


def run_round(
    problem: FlowProblem,
    config: SolverConfig,
    values: np.ndarray,
    params: ModelParams,
) -> Tuple[np.ndarray, ModelParams, List[IterationOutcome], str, int]:
    """
    One complete pass of the approximate algorithm from a starting M.

    Returns:
        (recovered flows in NeighborSets order, fitted params, inner outcomes,
         inner termination, inner iterations)
    """
    xyz = XYZState.from_values(values, problem.gamma)
    state = {"xyz": xyz, "params": params}
    start_value, _, _ = ApproxObjective(problem.N, problem.lam, problem.gamma, params, problem.d).evaluate(xyz)

    solver = ApproxSolver(config)
    outcomes, termination, iterations = solver.run_loop(
        problem, state, start_value, config.approx_tol, config.max_outer
    )

    params = state["params"]
    assembled = np.maximum(state["xyz"].flow_values(problem.gamma), M_MIN)
    recovered, report = maximize_flows(
        problem, assembled, params, config.m_tol, config.max_m_iter, config.m_gtol
    )
    logger.info("approx round: %d inner iterations (%s), final M-step %s",
                iterations, termination, report.reason)
    return recovered, params, outcomes, termination, iterations


def max_relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / np.maximum(1.0, new)))


def fit_approx(
    N: np.ndarray,
    regions: RegionSet,
    config: SolverConfig,
    outer: OuterLoopConfig = OuterLoopConfig(),
    truth: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Fit with the approximate algorithm, optionally nested in feedback rounds.

    Args:
        N: T×n count panel
        regions: Region set
        config: Solver settings; approx_tol is the inner criterion on L_approx
        outer: Feedback-round settings
        truth: Optional true flows (original scale) enabling the NAE stop rule

    Returns:
        FitResult; trace holds the exact-likelihood breakdown of each round's M
    """
    problem = prepare_problem(N, regions, config)
    gamma = problem.gamma

    values = initial_flows(problem, config)
    params = default_params(problem.n, problem.d)
    trace, history = [], {"round_nae": [], "m_change": [], "inner_iterations": [],
                          "inner_termination": [], "beta": []}
    best: Optional[Tuple[np.ndarray, ModelParams]] = None
    best_nae = np.inf
    termination = "max_rounds_reached"
    rounds = 0

    for rounds in range(1, outer.max_rounds + 1):
        if rounds > 1:
            params = ModelParams(departure_probabilities(values, gamma), params.s, params.beta)
        recovered, params, _, inner_termination, inner_iterations = run_round(problem, config, values, params)

        trace.append(penalised_breakdown(problem, recovered, params))
        history["inner_iterations"].append(inner_iterations)
        history["inner_termination"].append(inner_termination)
        history["beta"].append(params.beta)

        if truth is not None:
            error = nae(descale_flows(gamma.scatter(recovered), problem.plan), truth)
            history["round_nae"].append(error)
            logger.info("approx round %d: NAE=%.4f", rounds, error)
            if error >= best_nae:
                termination = "nae_stopped_decreasing"
                break
            best_nae, best = error, (recovered, params)
            values = recovered
            if outer.nae_target is not None and error <= outer.nae_target:
                termination = "nae_target_reached"
                break
        else:
            change = max_relative_change(recovered, values)
            history["m_change"].append(change)
            logger.info("approx round %d: max relative M change %.4g", rounds, change)
            best, values = (recovered, params), recovered
            if rounds > 1 and change < outer.m_change_tol:
                termination = CONVERGED
                break

    recovered, params = best
    return FitResult(
        M=descale_flows(gamma.scatter(recovered), problem.plan),
        params=params.normalized(),
        trace=trace,
        termination=termination,
        iterations=rounds,
        plan=problem.plan,
        history=history,
    )
