"""
Minimisers used by the solvers: box-constrained L-BFGS-B for the flow
variables and bounded Brent for the scalar distance decay.

Both wrap scipy.optimize. Maximisation anywhere in the code base is done by
minimising the negated objective.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
LINE_SEARCH_FAILURE = "line-search-failure"

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class BoxSpec:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape:
            raise ValueError(f"Bound shapes differ: {lower.shape} vs {upper.shape}")
        if np.any(lower > upper):
            raise ValueError("Every lower bound must be <= its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def floor(cls, size: int, lower: float = 0.0) -> "BoxSpec":
        """[lower, +inf) for every variable."""
        return cls(np.full(size, lower), np.full(size, np.inf))

    @classmethod
    def unbounded(cls, size: int) -> "BoxSpec":
        return cls(np.full(size, -np.inf), np.full(size, np.inf))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def to_scipy(self) -> optimize.Bounds:
        return optimize.Bounds(self.lower, self.upper)


@dataclass(frozen=True)
class OptimReport:
    value: float
    iterations: int
    reason: str
    message: str = ""


class _NonFiniteObjective(Exception):
    pass


class _TrackedObjective:
    """
    Remembers the best finite point seen and stops the search on NaN/inf.
    Values handed back are shifted by `offset`; best_value is unshifted.
    """

    def __init__(self, objective: Objective):
        self.objective = objective
        self.offset = 0.0
        self.best_x = None
        self.best_value = np.inf
        self.iterations = 0

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = self.objective(x)
        value = float(value)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise _NonFiniteObjective()
        if value < self.best_value:
            self.best_value = value
            self.best_x = np.array(x, copy=True)
        return value - self.offset, grad

    def count(self, _xk) -> None:
        self.iterations += 1


def minimize_box(
    objective: Objective,
    x0: np.ndarray,
    box: BoxSpec,
    tol: float = 1e-8,
    max_iter: int = 15000,
    history: int = 10,
    gtol: float = 1e-5,
) -> Tuple[np.ndarray, OptimReport]:
    """
    Limited-memory quasi-Newton minimisation inside a box.

    The search runs on f(x) - f(x0), so the relative function tolerance is
    measured against the decrease achieved so far rather than against |f|.
    A large constant in f (big populations, say) therefore cannot end the
    search early.

    Args:
        objective: Returns (value, gradient) for a flat vector
        x0: Starting point; projected onto the box first
        box: Lower/upper bounds per variable
        tol: Relative function tolerance
        max_iter: Iteration cap
        history: Number of stored correction pairs
        gtol: Absolute tolerance on the projected-gradient infinity norm

    Returns:
        (x*, OptimReport). x* is feasible and never worse than x0.
    """
    x0 = box.project(np.asarray(x0, dtype=float).ravel())
    tracked = _TrackedObjective(objective)
    try:
        f0, _ = tracked(x0)
    except _NonFiniteObjective:
        raise ValueError("Objective is not finite at the starting point")
    tracked.offset = f0

    options = {
        "maxiter": int(max_iter),
        "maxfun": max(15000, 20 * int(max_iter)),
        "maxcor": int(history),
        "ftol": tol,
        "gtol": gtol,
    }
    try:
        result = optimize.minimize(
            tracked,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=box.to_scipy(),
            options=options,
            callback=tracked.count,
        )
    except _NonFiniteObjective:
        logger.warning("Objective became non-finite after %d iterations", tracked.iterations)
        x = box.project(tracked.best_x)
        return x, OptimReport(tracked.best_value, tracked.iterations, LINE_SEARCH_FAILURE,
                              "non-finite objective")

    if result.status == 0:
        reason = CONVERGED
    elif result.status == 1:
        reason = MAX_ITER
    else:
        reason = LINE_SEARCH_FAILURE

    x, value = result.x, float(result.fun) + f0
    if tracked.best_value < value:
        x, value = tracked.best_x, tracked.best_value
    message = result.message if isinstance(result.message, str) else result.message.decode()
    logger.debug("L-BFGS-B: %s after %d iterations (f=%.6g)", reason, result.nit, value)
    return box.project(x), OptimReport(value, int(result.nit), reason, message)


def minimize_scalar_bounded(
    g: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> float:
    """
    Bounded Brent minimisation of g on [lo, hi].

    The endpoints are compared against Brent's answer so a minimum sitting on
    a bound is returned exactly.
    """
    if not lo < hi:
        raise ValueError(f"Need lo < hi, got [{lo}, {hi}]")

    result = optimize.minimize_scalar(
        g, bounds=(lo, hi), method="bounded", options={"xatol": tol, "maxiter": max_iter}
    )
    candidates = [(float(result.fun), float(result.x)), (float(g(lo)), lo), (float(g(hi)), hi)]
    best_value, best_x = candidates[0]
    for value, x in candidates[1:]:
        if value < best_value:
            best_value, best_x = value, x
    return float(best_x)
