"""
Population scaling: multiply counts so that admissible flows stay in the
regime where M(1 - log M) approximates log M!, compensate λ, and map the
fitted flows back to the original scale.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from model.geo import NeighborSets

logger = logging.getLogger(__name__)

LAMBDA_RULES = ("linear", "quadratic")
MAX_EXPONENT = 12


@dataclass(frozen=True)
class ScalePlan:
    c: float
    lam_original: float
    lam_scaled: float
    rule: str = "linear"

    def __post_init__(self):
        if self.c < 1:
            raise ValueError(f"Scale factor must be >= 1, got {self.c}")
        if self.rule not in LAMBDA_RULES:
            raise ValueError(f"Unknown lambda rule {self.rule!r}; use one of {LAMBDA_RULES}")

    def to_dict(self) -> Dict:
        return asdict(self)


def compensate_lambda(lam: float, c: float, rule: str = "linear") -> float:
    """λ/c keeps the penalty-to-likelihood ratio roughly fixed; λ/c² is the stricter alternative."""
    if rule == "linear":
        return lam / c
    if rule == "quadratic":
        return lam / c ** 2
    raise ValueError(f"Unknown lambda rule {rule!r}; use one of {LAMBDA_RULES}")


def fixed_plan(c: float, lam: float, rule: str = "linear") -> ScalePlan:
    return ScalePlan(c=float(c), lam_original=lam, lam_scaled=compensate_lambda(lam, c, rule), rule=rule)


def heuristic_flows(N: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """
    |N_ti - N_{t+1,i}| / |Γ_i \\ {i}| for each step and region: the off-diagonal
    value the moving initial guess would assign. NaN where the region has no
    destination or its count does not change.
    """
    change = np.abs(np.diff(N, axis=0))
    destinations = gamma.destination_counts()[None, :].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        flows = change / destinations
    return np.where((destinations > 0) & (change > 0), flows, np.nan)


def plan_scaling(
    N: np.ndarray,
    gamma: NeighborSets,
    target_min_flow: float = 1.0,
    lam: float = 10.0,
    rule: str = "linear",
) -> ScalePlan:
    """
    Pick the smallest power of ten c >= 1 lifting every heuristic flow to at
    least target_min_flow.

    Args:
        N: T×n count panel
        gamma: Neighbour sets
        target_min_flow: Smallest acceptable heuristic flow (>= 1)
        lam: Penalty weight to compensate
        rule: 'linear' (λ/c) or 'quadratic' (λ/c²)

    Returns:
        ScalePlan
    """
    if target_min_flow < 1:
        raise ValueError(f"target_min_flow must be >= 1, got {target_min_flow}")

    flows = heuristic_flows(np.asarray(N, dtype=float), gamma)
    smallest = np.nanmin(flows) if np.any(np.isfinite(flows)) else np.inf

    c = 1.0
    for exponent in range(MAX_EXPONENT + 1):
        c = 10.0 ** exponent
        if c * smallest >= target_min_flow:
            break
    else:
        logger.warning("Heuristic flows stay below %s even at c=1e%d", target_min_flow, MAX_EXPONENT)

    plan = fixed_plan(c, lam, rule)
    logger.info("Scaling plan: c=%g, lambda %g -> %g (%s)", plan.c, lam, plan.lam_scaled, rule)
    return plan


def apply_scaling(N: np.ndarray, plan: ScalePlan) -> np.ndarray:
    return np.asarray(N, dtype=float) * plan.c


def descale_flows(M: np.ndarray, plan: ScalePlan) -> np.ndarray:
    return np.asarray(M, dtype=float) / plan.c
