"""
Evaluation of fitted flow tensors: error against a known truth, agreement
between fits, repeatability over initialisations, conservation and
inbound/outbound totals.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from model.errors import FlowInputError

logger = logging.getLogger(__name__)

MEAN_FLOOR = 1e-9


def _pair(M_est, M_true) -> Tuple[np.ndarray, np.ndarray]:
    M_est = np.asarray(M_est, dtype=float)
    M_true = np.asarray(M_true, dtype=float)
    if M_est.shape != M_true.shape:
        raise FlowInputError(f"Shape mismatch: estimate {M_est.shape} vs truth {M_true.shape}")
    return M_est, M_true


def _offdiag_mask(shape: Tuple[int, ...]) -> np.ndarray:
    n = shape[-1]
    return np.broadcast_to(~np.eye(n, dtype=bool), shape)


def nae(M_est, M_true) -> float:
    """
    Normalised absolute error Σ|M* - M| / ΣM*.

    Raises:
        FlowInputError: If the shapes differ or the truth sums to zero
    """
    M_est, M_true = _pair(M_est, M_true)
    total = M_true.sum()
    if total <= 0:
        raise FlowInputError("NAE is undefined when the true flows sum to zero")
    return float(np.abs(M_true - M_est).sum() / total)


def offdiag_nae(M_est, M_true) -> float:
    """NAE restricted to movers (i ≠ j)."""
    M_est, M_true = _pair(M_est, M_true)
    mask = _offdiag_mask(M_true.shape)
    total = M_true[mask].sum()
    if total <= 0:
        raise FlowInputError("Off-diagonal NAE is undefined when no true flow leaves a region")
    return float(np.abs(M_true[mask] - M_est[mask]).sum() / total)


@dataclass
class StabilityReport:
    """
    Per-entry spread of fitted flows over repeated runs.

    Entries whose mean is below 1e-9 have no meaningful ratio; they are
    excluded from `ratio` statistics and counted in `zero_mean_count`.
    """

    mean: np.ndarray
    std: np.ndarray
    ratio: np.ndarray  # NaN where the mean is below the floor
    runs: int

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.ratio)

    @property
    def zero_mean_count(self) -> int:
        return int((~self.defined).sum())

    @property
    def fraction_below_one(self) -> float:
        ratios = self.ratio[self.defined]
        return float(np.mean(ratios < 1.0)) if ratios.size else 0.0

    def histogram(self, bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
        """(counts, bin edges) of the defined ratios."""
        ratios = self.ratio[self.defined]
        if ratios.size == 0:
            return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
        return np.histogram(ratios, bins=bins)

    def histogram_table(self, bins: int = 20) -> pd.DataFrame:
        counts, edges = self.histogram(bins)
        return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})

    def to_dict(self, bins: int = 20) -> Dict[str, Any]:
        counts, edges = self.histogram(bins)
        ratios = self.ratio[self.defined]
        return {
            "runs": self.runs,
            "entries": int(self.ratio.size),
            "zero_mean_entries": self.zero_mean_count,
            "fraction_ratio_below_one": self.fraction_below_one,
            "median_ratio": float(np.median(ratios)) if ratios.size else None,
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }


def stability_report(runs: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> StabilityReport:
    """
    Mean, population standard deviation and their ratio for every entry.

    Args:
        runs: Fitted flow tensors of identical shape
        mask: Optional boolean selection of entries (e.g. the active pairs,
            broadcast over time); all entries are used when omitted

    Raises:
        FlowInputError: With fewer than two runs or mismatched shapes
    """
    if len(runs) < 2:
        raise FlowInputError(f"A stability report needs at least 2 runs, got {len(runs)}")
    shapes = {np.shape(run) for run in runs}
    if len(shapes) != 1:
        raise FlowInputError(f"Runs have different shapes: {sorted(shapes)}")

    stack = np.stack([np.asarray(run, dtype=float) for run in runs])
    if mask is not None:
        stack = stack[:, np.broadcast_to(mask, stack.shape[1:])]
    else:
        stack = stack.reshape(len(runs), -1)

    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    ratio = np.full_like(mean, np.nan)
    defined = mean >= MEAN_FLOOR
    ratio[defined] = std[defined] / mean[defined]
    return StabilityReport(mean=mean, std=std, ratio=ratio, runs=len(runs))


@dataclass
class InOutSummary:
    """Off-diagonal totals per region over a window of steps."""

    outbound: np.ndarray
    inbound: np.ndarray
    window: Tuple[int, ...]

    def to_frame(self, region_ids: Sequence[str]) -> pd.DataFrame:
        return pd.DataFrame({"region_id": list(region_ids), "outbound": self.outbound, "inbound": self.inbound})


def aggregate_inout(M, window: Sequence[int]) -> InOutSummary:
    """
    Total outbound Σ_t Σ_{j≠i} M_tij and inbound Σ_t Σ_{j≠i} M_tji.

    Args:
        M: (T-1)×n×n flow tensor
        window: Step indices to include

    Raises:
        FlowInputError: If the window is empty or out of range
    """
    M = np.asarray(M, dtype=float)
    window = tuple(int(t) for t in window)
    if not window:
        raise FlowInputError("The aggregation window is empty")
    if min(window) < 0 or max(window) >= M.shape[0]:
        raise FlowInputError(f"Window {window} outside steps 0..{M.shape[0] - 1}")

    moved = M[list(window)].sum(axis=0)
    np.fill_diagonal(moved, 0.0)
    return InOutSummary(outbound=moved.sum(axis=1), inbound=moved.sum(axis=0), window=window)


def median_abs_log_ratio(M_a, M_b, mask: Optional[np.ndarray] = None, floor: float = 1e-9) -> float:
    """
    Median of |log(M_a / M_b)| over the selected entries; a scale-free
    measure of how closely two fits agree.
    """
    M_a, M_b = _pair(M_a, M_b)
    if mask is not None:
        selected = np.broadcast_to(mask, M_a.shape)
        M_a, M_b = M_a[selected], M_b[selected]
    return float(np.median(np.abs(np.log(np.maximum(M_a, floor)) - np.log(np.maximum(M_b, floor)))))


def pearson(a, b) -> float:
    """Pearson correlation of two equally long vectors."""
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if a.size != b.size or a.size < 2:
        raise FlowInputError("pearson needs two vectors of equal length >= 2")
    return float(stats.pearsonr(a, b)[0])


def scaling_agreement(M_a, M_b, rel: float = 0.1, abs_tol: float = 0.5,
                      mask: Optional[np.ndarray] = None) -> float:
    """Fraction of entries whose values agree within `rel` relative or `abs_tol` absolute."""
    M_a, M_b = _pair(M_a, M_b)
    if mask is not None:
        selected = np.broadcast_to(mask, M_a.shape)
        M_a, M_b = M_a[selected], M_b[selected]
    diff = np.abs(M_a - M_b)
    close = (diff <= abs_tol) | (diff <= rel * np.maximum(np.abs(M_a), np.abs(M_b)))
    return float(np.mean(close)) if close.size else 1.0


def conservation_cost(M, N) -> float:
    """C = Σ_t Σ_i (N_ti - Σ_j M_tij)² + (N_{t+1,i} - Σ_j M_tji)²."""
    M = np.asarray(M, dtype=float)
    N = np.asarray(N, dtype=float)
    if M.shape[0] != N.shape[0] - 1 or M.shape[1:] != (N.shape[1], N.shape[1]):
        raise FlowInputError(f"Flows of shape {M.shape} do not match counts of shape {N.shape}")
    outgoing = N[:-1] - M.sum(axis=2)
    arriving = N[1:] - M.sum(axis=1)
    return float(np.sum(outgoing ** 2) + np.sum(arriving ** 2))
