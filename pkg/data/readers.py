"""
File formats of the engine - thin pandas/json wrappers.

Centroids `region_id,x,y`, counts `region_id,timestamp,count`, flows
`t,origin_id,dest_id,flow` (admissible entries only), params and report JSON.
Region order is always the centroid-file order.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from model.errors import FlowInputError
from model.geo import RegionSet
from model.likelihood import ModelParams

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _read_csv(path: Path, required: Sequence[str]) -> pd.DataFrame:
    frame = pd.read_csv(
        path,
        dtype={"region_id": str, "origin_id": str, "dest_id": str},
        float_precision="round_trip",
    )
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise FlowInputError(f"{path}: missing column(s) {missing}; expected header {','.join(required)}")
    return frame


def load_centroids(path: Path) -> RegionSet:
    """
    Read `region_id,x,y` centroids (already projected to planar units).

    Returns:
        RegionSet in file order
    """
    frame = _read_csv(path, ["region_id", "x", "y"])
    if frame[["x", "y"]].isna().any().any():
        bad = frame.loc[frame[["x", "y"]].isna().any(axis=1), "region_id"].tolist()
        raise FlowInputError(f"{path}: missing coordinates for regions {bad}")
    return RegionSet(frame["region_id"].tolist(), frame[["x", "y"]].to_numpy(dtype=float))


def _parse_timestamps(values: pd.Series) -> pd.Series:
    numeric = pd.to_numeric(values, errors="coerce")
    if numeric.notna().all():
        return numeric
    try:
        return pd.to_datetime(values)
    except (ValueError, TypeError) as exc:
        raise FlowInputError(f"Unparseable timestamps: {exc}")


def window_positions(window: Optional[str], length: int) -> List[int]:
    """
    Positions selected by a window expression.

    Args:
        window: 'start:stop' with Python slice semantics (either side may be
            empty); None selects everything
        length: Number of positions available

    Raises:
        FlowInputError: If the expression is malformed or selects nothing
    """
    if window is None:
        return list(range(length))
    try:
        start, stop = (int(part) if part.strip() else None for part in window.split(":"))
    except ValueError:
        raise FlowInputError(f"Window must look like 'start:stop', got {window!r}")
    positions = list(range(length))[slice(start, stop)]
    if not positions:
        raise FlowInputError(f"Window {window!r} selects nothing out of {length} positions")
    return positions


def load_counts(
    path: Path,
    regions: RegionSet,
    window: Optional[str] = None,
) -> Tuple[np.ndarray, RegionSet, List[Any]]:
    """
    Read a long-format count file and pivot it to a T×n panel.

    Args:
        path: CSV with `region_id,timestamp,count`
        regions: Centroids; their order fixes the column order
        window: Optional snapshot selection ('start:stop' over sorted timestamps)

    Returns:
        (N, regions kept, timestamps). Regions with a missing value anywhere
        in the window, or absent from the file, are dropped and logged.

    Raises:
        FlowInputError: On duplicate rows, ids unknown to the centroid file,
            timestamps that go backwards within a region, or counts that are
            negative or not numbers
    """
    frame = _read_csv(path, ["region_id", "timestamp", "count"])
    frame["timestamp"] = _parse_timestamps(frame["timestamp"])

    duplicated = frame.duplicated(["region_id", "timestamp"], keep=False)
    if duplicated.any():
        pairs = frame.loc[duplicated, ["region_id", "timestamp"]].drop_duplicates()
        raise FlowInputError(f"{path}: duplicate (region_id, timestamp) rows: {pairs.values.tolist()[:10]}")

    unknown = sorted(set(frame["region_id"]) - set(regions.ids))
    if unknown:
        raise FlowInputError(f"{path}: region ids not in the centroid file: {unknown}")

    ordered = frame.groupby("region_id", sort=False)["timestamp"].apply(lambda s: s.is_monotonic_increasing)
    if not ordered.all():
        raise FlowInputError(f"{path}: timestamps go backwards for regions {ordered[~ordered].index.tolist()}")

    counts = pd.to_numeric(frame["count"], errors="coerce")
    garbled = counts.isna() & frame["count"].notna()
    if garbled.any():
        raise FlowInputError(
            f"{path}: non-numeric counts for regions {sorted(set(frame.loc[garbled, 'region_id']))}"
        )
    frame["count"] = counts

    if (frame["count"] < 0).any():
        raise FlowInputError(f"{path}: negative counts")

    panel = frame.pivot(index="timestamp", columns="region_id", values="count").sort_index()
    timestamps = list(panel.index)
    spacing = np.diff(np.asarray(panel.index))
    if len(spacing) > 1 and not np.all(spacing == spacing[0]):
        logger.warning("%s: timestamps are not evenly spaced", path)

    positions = window_positions(window, len(timestamps))
    panel = panel.iloc[positions].reindex(columns=list(regions.ids))
    timestamps = [timestamps[p] for p in positions]

    incomplete = panel.columns[panel.isna().any(axis=0)].tolist()
    if incomplete:
        logger.warning("Dropping %d regions with missing counts in the window: %s", len(incomplete), incomplete)
    kept = [region_id for region_id in regions.ids if region_id not in set(incomplete)]
    if not kept:
        raise FlowInputError(f"{path}: no region has complete counts in the selected window")

    subset = regions.subset(kept)
    N = panel[list(subset.ids)].to_numpy(dtype=float)
    logger.info("Loaded counts: %d snapshots x %d regions", N.shape[0], N.shape[1])
    return N, subset, timestamps


def write_centroids(path: Path, regions: RegionSet) -> None:
    pd.DataFrame({
        "region_id": list(regions.ids),
        "x": regions.coords[:, 0],
        "y": regions.coords[:, 1],
    }).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_counts(path: Path, N: np.ndarray, regions: RegionSet, timestamps: Optional[Sequence] = None) -> None:
    """Long-format counts; timestamps default to the snapshot index."""
    T, n = N.shape
    timestamps = list(range(T)) if timestamps is None else list(timestamps)
    pd.DataFrame({
        "region_id": np.tile(list(regions.ids), T),
        "timestamp": np.repeat(timestamps, n),
        "count": N.ravel(),
    }).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_flows(path: Path, M: np.ndarray, regions: RegionSet, mask: np.ndarray) -> None:
    """
    Write the admissible entries of M.

    Args:
        path: Output CSV
        M: (T-1)×n×n flows
        regions: Region ids for both axes
        mask: n×n admissible pairs
    """
    t, i, j = np.nonzero(np.broadcast_to(mask, M.shape))
    ids = np.asarray(regions.ids, dtype=object)
    pd.DataFrame({
        "t": t,
        "origin_id": ids[i],
        "dest_id": ids[j],
        "flow": M[t, i, j],
    }).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_flows(path: Path, regions: RegionSet, steps: Optional[int] = None) -> np.ndarray:
    """
    Read a flow CSV back into a dense tensor; unlisted entries are zero.

    Raises:
        FlowInputError: On region ids unknown to `regions`
    """
    frame = _read_csv(path, ["t", "origin_id", "dest_id", "flow"])
    index = regions.index()
    unknown = sorted((set(frame["origin_id"]) | set(frame["dest_id"])) - set(index))
    if unknown:
        raise FlowInputError(f"{path}: region ids not in the centroid file: {unknown}")

    steps = int(frame["t"].max()) + 1 if steps is None else steps
    M = np.zeros((steps, regions.n, regions.n))
    M[frame["t"].to_numpy(dtype=int),
      frame["origin_id"].map(index).to_numpy(dtype=int),
      frame["dest_id"].map(index).to_numpy(dtype=int)] = frame["flow"].to_numpy(dtype=float)
    return M


def write_json(path: Path, data: Dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default), encoding="utf-8")


def read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FlowInputError(f"{path}: invalid JSON ({exc})")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, pd.Timestamp):
        return value.isoformat()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_params(path: Path, params: ModelParams, regions: RegionSet) -> None:
    """`{"beta": β, "regions": {id: {"pi": π, "s": s}}}`"""
    write_json(path, {
        "beta": params.beta,
        "regions": {
            region_id: {"pi": float(params.pi[i]), "s": float(params.s[i])}
            for i, region_id in enumerate(regions.ids)
        },
    })


def read_params(path: Path, regions: RegionSet) -> ModelParams:
    data = read_json(path)
    missing = [region_id for region_id in regions.ids if region_id not in data.get("regions", {})]
    if missing:
        raise FlowInputError(f"{path}: no parameters for regions {missing}")
    entries = [data["regions"][region_id] for region_id in regions.ids]
    return ModelParams([e["pi"] for e in entries], [e["s"] for e in entries], data["beta"])
