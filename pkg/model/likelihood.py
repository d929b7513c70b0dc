"""
Log-likelihood of the exact flow model, its conservation cost, and the
analytic gradient with respect to the flows.

Flows are handled internally as (T-1)×E matrices over the admissible pairs of
a NeighborSets ordering; the public functions accept dense tensors.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.special import xlogy

from model.errors import FlowInputError, FlowModelError, NonFiniteLikelihoodError
from model.geo import NeighborSets

logger = logging.getLogger(__name__)

# Active flows are floored here inside logarithms; also the optimiser's lower bound.
M_MIN = 1e-12
PI_MAX = 1.0 - 1e-9
_TINY = np.finfo(float).tiny


@dataclass
class ModelParams:
    """Departure probabilities π, gathering scores s, distance decay β."""

    pi: np.ndarray
    s: np.ndarray
    beta: float

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.beta = float(self.beta)
        if self.pi.shape != self.s.shape or self.pi.ndim != 1:
            raise FlowInputError(
                f"pi and s must be vectors of equal length, got {self.pi.shape} and {self.s.shape}"
            )
        if np.any(self.pi < 0) or np.any(self.pi >= 1) or not np.all(np.isfinite(self.pi)):
            raise FlowInputError("Departure probabilities must lie in [0, 1)")
        if np.any(self.s <= 0) or not np.all(np.isfinite(self.s)):
            raise FlowInputError("Gathering scores must be positive and finite")
        if not np.isfinite(self.beta):
            raise FlowInputError(f"beta must be finite, got {self.beta}")

    @property
    def n(self) -> int:
        return len(self.pi)

    def normalized(self) -> "ModelParams":
        """Same model with s rescaled so that max(s) = 1."""
        return ModelParams(self.pi.copy(), self.s / self.s.max(), self.beta)

    def to_dict(self) -> Dict:
        return {"pi": self.pi.tolist(), "s": self.s.tolist(), "beta": self.beta}


@dataclass(frozen=True)
class LikelihoodBreakdown:
    L0: float
    L1: float
    L2: float
    C: float
    total: float

    @classmethod
    def from_terms(cls, L0: float, L1: float, L2: float, C: float, lam: float) -> "LikelihoodBreakdown":
        terms = {"L0": L0, "L1": L1, "L2": L2, "C": C}
        for name, value in terms.items():
            if not np.isfinite(value):
                raise NonFiniteLikelihoodError(name, value)
        return cls(L0=L0, L1=L1, L2=L2, C=C, total=L0 + L1 + L2 - 0.5 * lam * C)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def validate_counts(N) -> np.ndarray:
    """
    Check a T×n count panel.

    Raises:
        FlowInputError: If fewer than two snapshots, or negative / non-finite counts
    """
    N = np.asarray(N, dtype=float)
    if N.ndim != 2 or N.shape[0] < 2:
        raise FlowInputError(f"Count panel must be T×n with T >= 2, got shape {N.shape}")
    if not np.all(np.isfinite(N)):
        raise FlowInputError("Count panel contains non-finite values")
    if np.any(N < 0):
        raise FlowInputError("Count panel contains negative counts")
    return N


def log_normalizers(params: ModelParams, d: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """
    log Σ_{k∈Γ_i\\{i}} s_k exp(-β d_ik) for every region, -inf where Γ_i = {i}.
    """
    rows = gamma.rows[gamma.offdiag]
    cols = gamma.cols[gamma.offdiag]
    exponents = np.log(params.s[cols]) - params.beta * d[rows, cols]
    return segment_logsumexp(exponents, rows, gamma.n)


def segment_logsumexp(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    """Per-segment logsumexp of `values` grouped by integer labels in [0, n)."""
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, segments, values)
    safe_peak = np.where(np.isfinite(peak), peak, 0.0)
    summed = np.bincount(segments, weights=np.exp(values - safe_peak[segments]), minlength=n)
    with np.errstate(divide="ignore"):
        return np.where(summed > 0, safe_peak + np.log(summed), -np.inf)


def _check_destinations(params: ModelParams, gamma: NeighborSets) -> None:
    stranded = np.flatnonzero((params.pi > 0) & (gamma.destination_counts() == 0))
    if stranded.size:
        raise FlowModelError(
            f"Regions {stranded.tolist()} have a departure probability but no "
            f"destination within K={gamma.cutoff}"
        )


def transition_matrix(params: ModelParams, d: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """
    Row-stochastic n×n transition matrix θ.

    θ_ii = 1 - π_i and the departing mass π_i is shared among Γ_i \\ {i} in
    proportion to s_j exp(-β d_ij).

    Raises:
        FlowModelError: If a region with π_i > 0 has no admissible destination
    """
    _check_destinations(params, gamma)
    log_z = log_normalizers(params, d, gamma)

    rows = gamma.rows[gamma.offdiag]
    cols = gamma.cols[gamma.offdiag]
    theta = np.zeros((gamma.n, gamma.n))
    theta[rows, cols] = params.pi[rows] * np.exp(
        np.log(params.s[cols]) - params.beta * d[rows, cols] - log_z[rows]
    )
    theta[np.arange(gamma.n), np.arange(gamma.n)] = 1.0 - params.pi
    return theta


def flow_coefficients(params: ModelParams, d: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    """
    Per-entry weight multiplying M_tij in L0 + L1, in NeighborSets order.

    Diagonal entries carry log(1 - π_i); off-diagonal entries carry
    log π_i + log s_j - β d_ij - log Σ_k s_k exp(-β d_ik). These depend only on
    (π, s, β) and are reused for every evaluation over M.
    """
    log_z = log_normalizers(params, d, gamma)
    rows, cols = gamma.rows, gamma.cols
    log_pi = np.log(np.maximum(params.pi, _TINY))

    coef = np.empty(gamma.n_active)
    diag = gamma.diagonal
    coef[diag] = np.log1p(-params.pi[rows[diag]])
    off = gamma.offdiag
    coef[off] = (
        log_pi[rows[off]]
        + np.log(params.s[cols[off]])
        - params.beta * d[rows[off], cols[off]]
        - log_z[rows[off]]
    )
    return coef


class FlowObjective:
    """
    L0 + L1 + L2 - (λ/2) C as a function of the admissible flows.

    The same object serves the exact M-step and the final M recovery of the
    approximate algorithm; the latter's likelihood and Jacobian coincide with
    this one once the M_tij factor of its third sum is restored.
    """

    def __init__(
        self,
        N: np.ndarray,
        lam: float,
        gamma: NeighborSets,
        coefficients: np.ndarray,
    ):
        self.N = N
        self.lam = float(lam)
        self.gamma = gamma
        self.coef = coefficients
        self.steps = N.shape[0] - 1
        self._dense = np.zeros((self.steps, gamma.n, gamma.n))

    @property
    def size(self) -> int:
        return self.steps * self.gamma.n_active

    def residuals(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Row and column conservation residuals N_t - Σ_j M_tij, N_{t+1} - Σ_j M_tji.

        Both sums run along a contiguous last axis so numpy sums them pairwise.
        """
        dense = self._dense
        dense[:, self.gamma.rows, self.gamma.cols] = values.reshape(self.steps, -1)
        out_sums = dense.sum(axis=2)
        in_sums = np.ascontiguousarray(dense.transpose(0, 2, 1)).sum(axis=2)
        return self.N[:-1] - out_sums, self.N[1:] - in_sums

    def breakdown(self, values: np.ndarray) -> LikelihoodBreakdown:
        values = values.reshape(self.steps, -1)
        weighted = values * self.coef[None, :]
        diag = self.gamma.diagonal
        L0 = float(np.sum(weighted[:, diag]))
        L1 = float(np.sum(weighted[:, ~diag]))
        # x(1 - log x) with 0(1 - log 0) = 0
        L2 = float(np.sum(values - xlogy(values, values)))
        out_res, in_res = self.residuals(values)
        C = float(np.sum(out_res ** 2) + np.sum(in_res ** 2))
        return LikelihoodBreakdown.from_terms(L0, L1, L2, C, self.lam)

    def gradient(self, values: np.ndarray) -> np.ndarray:
        values = values.reshape(self.steps, -1)
        out_res, in_res = self.residuals(values)
        return (
            self.coef[None, :]
            - np.log(np.maximum(values, M_MIN))
            + self.lam * (out_res[:, self.gamma.rows] + in_res[:, self.gamma.cols])
        )

    def negated(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        """Value and gradient of -L for a minimiser working on a flat vector."""
        values = x.reshape(self.steps, -1)
        total = self.breakdown(values).total
        return -total, -self.gradient(values).ravel()


def _check_flows(M: np.ndarray, N: np.ndarray, gamma: NeighborSets) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    expected = (N.shape[0] - 1, gamma.n, gamma.n)
    if M.shape != expected or N.shape[1] != gamma.n:
        raise FlowInputError(f"Flow tensor shape {M.shape} does not match counts {N.shape}")
    if np.any(M < 0):
        raise FlowInputError("Flow tensor contains negative entries")
    if np.any(M[:, ~gamma.mask()] != 0):
        raise FlowInputError("Flow tensor has mass outside the admissible neighbour sets")
    return M


def exact_loglik(
    M: np.ndarray,
    params: ModelParams,
    N: np.ndarray,
    lam: float,
    d: np.ndarray,
    gamma: NeighborSets,
) -> LikelihoodBreakdown:
    """
    Evaluate L0, L1, L2, the conservation cost C and the penalised total.

    Args:
        M: (T-1)×n×n flows, zero outside the neighbour sets
        params: Model parameters (π, s, β)
        N: T×n count panel
        lam: Weight λ of the conservation cost
        d: n×n distance matrix
        gamma: Neighbour sets under the cutoff

    Returns:
        LikelihoodBreakdown

    Raises:
        FlowInputError: On negative flows or inconsistent shapes
        NonFiniteLikelihoodError: If a term is not finite
    """
    N = validate_counts(N)
    M = _check_flows(M, N, gamma)
    objective = FlowObjective(N, lam, gamma, flow_coefficients(params, d, gamma))
    return objective.breakdown(gamma.gather(M))


def exact_grad_M(
    M: np.ndarray,
    params: ModelParams,
    N: np.ndarray,
    lam: float,
    d: np.ndarray,
    gamma: NeighborSets,
) -> np.ndarray:
    """Gradient of the penalised total with respect to every M_tij (zero at structural zeros)."""
    N = validate_counts(N)
    M = _check_flows(M, N, gamma)
    objective = FlowObjective(N, lam, gamma, flow_coefficients(params, d, gamma))
    return gamma.scatter(objective.gradient(gamma.gather(M)))
