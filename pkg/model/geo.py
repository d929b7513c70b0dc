"""
Region geometry: centroid-to-centroid distances and the neighbour sets
allowed by the travel cutoff.
"""

import logging
from collections import Counter
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from model.errors import FlowInputError

logger = logging.getLogger(__name__)


class RegionSet:
    """Ordered region identifiers with planar centroid coordinates."""

    def __init__(self, ids: Sequence, coords):
        """
        Build a region set.

        Args:
            ids: Region identifiers; their order is the canonical region index
            coords: n pairs of planar coordinates (already projected)

        Raises:
            FlowInputError: If ids repeat, are empty, or do not match coords
        """
        ids = [str(region_id) for region_id in ids]
        coords = np.asarray(coords, dtype=float)

        if len(ids) == 0:
            raise FlowInputError("A region set needs at least one region")
        if len(set(ids)) != len(ids):
            duplicates = sorted(k for k, v in Counter(ids).items() if v > 1)
            raise FlowInputError(f"Duplicate region ids: {duplicates}")
        if coords.shape != (len(ids), 2):
            raise FlowInputError(
                f"Expected coordinates of shape ({len(ids)}, 2), got {coords.shape}"
            )

        self.ids: Tuple[str, ...] = tuple(ids)
        self.coords = coords
        self.coords.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    def index(self) -> Dict[str, int]:
        """Map each region id to its position."""
        return {region_id: i for i, region_id in enumerate(self.ids)}

    def subset(self, keep: Sequence[str]) -> "RegionSet":
        """Regions named in `keep`, in this set's order."""
        wanted = set(keep)
        positions = [i for i, region_id in enumerate(self.ids) if region_id in wanted]
        return RegionSet([self.ids[i] for i in positions], self.coords[positions])

    def __len__(self) -> int:
        return self.n

    def __repr__(self):
        return f"RegionSet(n={self.n}, first={self.ids[0]!r})"


class NeighborSets:
    """
    Destinations reachable from each region within the cutoff.

    Besides the per-region index lists, the class fixes one flat ordering of
    all admissible (origin, destination) pairs. Every solver stores flows as
    vectors in this order, so structural zeros never enter an optimisation.
    """

    def __init__(self, members: List[np.ndarray], cutoff: float):
        self.members = [np.asarray(m, dtype=np.int64) for m in members]
        self.cutoff = float(cutoff)

        rows = np.concatenate(
            [np.full(len(m), i, dtype=np.int64) for i, m in enumerate(self.members)]
        )
        cols = np.concatenate(self.members)
        self.rows = rows
        self.cols = cols
        self.diagonal = rows == cols
        self.offdiag = ~self.diagonal
        # position of each region's stay-put entry in the flat ordering
        self.diag_index = np.flatnonzero(self.diagonal)

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def n_active(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.members[i]

    def sizes(self) -> np.ndarray:
        """|Γ_i| for every region."""
        return np.array([len(m) for m in self.members], dtype=np.int64)

    def destination_counts(self) -> np.ndarray:
        """|Γ_i \\ {i}|: the number of destinations other than staying."""
        return self.sizes() - 1

    def mask(self) -> np.ndarray:
        """Dense boolean n×n matrix of admissible pairs."""
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[self.rows, self.cols] = True
        return mask

    def is_symmetric(self) -> bool:
        mask = self.mask()
        return bool(np.array_equal(mask, mask.T))

    def gather(self, M: np.ndarray) -> np.ndarray:
        """Dense (T-1)×n×n tensor -> (T-1)×E matrix of admissible entries."""
        return M[:, self.rows, self.cols]

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """(T-1)×E admissible entries -> dense (T-1)×n×n tensor."""
        values = np.atleast_2d(values)
        M = np.zeros((values.shape[0], self.n, self.n))
        M[:, self.rows, self.cols] = values
        return M

    def __repr__(self):
        return f"NeighborSets(n={self.n}, cutoff={self.cutoff}, active={self.n_active})"


def build_distance_matrix(regions: RegionSet) -> np.ndarray:
    """
    Euclidean centroid-to-centroid distances.

    Args:
        regions: Region set with planar coordinates

    Returns:
        Symmetric n×n array with a zero diagonal

    Raises:
        FlowInputError: If any coordinate is NaN or infinite
    """
    if not np.all(np.isfinite(regions.coords)):
        bad = [regions.ids[i] for i in np.flatnonzero(~np.isfinite(regions.coords).all(axis=1))]
        raise FlowInputError(f"Non-finite coordinates for regions: {bad}")

    d = cdist(regions.coords, regions.coords)
    np.fill_diagonal(d, 0.0)
    return d


def neighbor_sets(d: np.ndarray, K: float) -> NeighborSets:
    """
    Γ_i = {j | d_ij <= K}. Ties at exactly K are admitted.

    Args:
        d: n×n distance matrix
        K: Travel cutoff in the distance units of d

    Returns:
        NeighborSets; every region contains itself

    Raises:
        FlowInputError: If K is negative or d is not square
    """
    if K < 0:
        raise FlowInputError(f"Cutoff must be non-negative, got {K}")
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise FlowInputError(f"Distance matrix must be square, got {d.shape}")

    within = d <= K
    np.fill_diagonal(within, True)
    members = [np.flatnonzero(row) for row in within]

    isolated = [i for i, m in enumerate(members) if len(m) == 1]
    if isolated:
        logger.debug("%d regions have no destination within K=%s", len(isolated), K)
    return NeighborSets(members, K)


def mean_positive_distance(d: np.ndarray) -> float:
    """Average of the strictly positive entries of d (0 if there are none)."""
    positive = d[d > 0]
    return float(positive.mean()) if positive.size else 0.0
