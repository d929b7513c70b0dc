"""
Command dispatch for the batch front door.

Each command takes a RunConfig and returns a JSON-ready result dict; `run`
wraps the call, catches engine errors and always writes exactly one
report.json into the output directory.
"""

import logging
import time
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.settings import RunConfig, SolverConfig
from data.readers import (
    load_centroids,
    load_counts,
    read_flows,
    read_json,
    window_positions,
    write_centroids,
    write_counts,
    write_flows,
    write_json,
    write_params,
)
from data.simulator import ScenarioSpec, scenario_by_name, simulate
from evaluation.metrics import (
    aggregate_inout,
    conservation_cost,
    nae,
    offdiag_nae,
    stability_report,
)
from model.errors import FlowError, FlowInputError
from model.geo import RegionSet, build_distance_matrix, neighbor_sets
from solvers.approx import OuterLoopConfig, fit_approx
from solvers.base import FitResult
from solvers.exact import InitStrategy, fit_exact

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
REPORT_NAME = "report.json"


def _require(config: RunConfig, *names: str) -> None:
    missing = [name for name in names if getattr(config, name) is None]
    if missing:
        flags = ", ".join(f"--{name}" for name in missing)
        raise FlowInputError(f"Command '{config.command}' needs {flags}")


def _solver(config: RunConfig) -> SolverConfig:
    if config.solver is None:
        raise FlowInputError(f"Command '{config.command}' needs a cutoff (--cutoff or CUTOFF=...)")
    return config.solver


def _admissible(regions: RegionSet, cutoff: float) -> np.ndarray:
    return neighbor_sets(build_distance_matrix(regions), cutoff).mask()


def _load_panel(config: RunConfig) -> Tuple[np.ndarray, RegionSet, RegionSet]:
    _require(config, "counts", "centroids")
    regions = load_centroids(config.centroids)
    N, kept, _ = load_counts(config.counts, regions, config.window)
    return N, kept, regions


def _load_truth(config: RunConfig, regions: RegionSet, kept: RegionSet) -> Optional[np.ndarray]:
    """True flows restricted to the kept regions and the selected window."""
    if config.truth is None:
        return None
    truth = read_flows(config.truth, regions)
    if config.window is not None:
        positions = window_positions(config.window, truth.shape[0] + 1)
        truth = truth[positions[0]:positions[-1]]
    keep = [regions.index()[region_id] for region_id in kept.ids]
    return truth[:, keep][:, :, keep]


def _truth_metrics(M: np.ndarray, truth: Optional[np.ndarray]) -> Dict[str, float]:
    if truth is None:
        return {}
    if truth.shape != M.shape:
        raise FlowInputError(f"True flows cover shape {truth.shape}, fitted flows {M.shape}")
    return {"nae": nae(M, truth), "offdiag_nae": offdiag_nae(M, truth)}


def _write_fit(config: RunConfig, fit: FitResult, regions: RegionSet, cutoff: float) -> None:
    write_flows(config.output_dir / "flows.csv", fit.M, regions, _admissible(regions, cutoff))
    write_params(config.output_dir / "params.json", fit.params, regions)


def _init_strategy(config: RunConfig, seed: Optional[int] = None) -> InitStrategy:
    if config.init == "static-jittered":
        return InitStrategy(config.init, config.seed if seed is None else seed)
    return InitStrategy(config.init)


def _outer_loop(config: RunConfig) -> OuterLoopConfig:
    return OuterLoopConfig(config.outer_rounds, config.nae_target, config.m_change_tol)


def cmd_simulate(config: RunConfig) -> Dict[str, Any]:
    """Simulate a scenario file or a built-in benchmark and write its inputs and truth."""
    if config.scenario is not None:
        spec = ScenarioSpec.from_dict(read_json(config.scenario))
    elif config.benchmark is not None:
        spec = scenario_by_name(config.benchmark, config.population, config.steps, config.noise, config.seed)
    else:
        raise FlowInputError("simulate needs --scenario or --benchmark")

    truth = simulate(spec)
    out = config.output_dir
    write_centroids(out / "centroids.csv", spec.regions)
    write_counts(out / "counts.csv", truth.N, spec.regions)
    write_flows(out / "truth_flows.csv", truth.M_true, spec.regions, _admissible(spec.regions, spec.cutoff))
    write_params(out / "truth_params.json", spec.params, spec.regions)
    write_json(out / "scenario.json", spec.to_dict())
    return {"regions": spec.regions.n, "snapshots": int(truth.N.shape[0]), "people": float(truth.N[0].sum())}


def cmd_fit_exact(config: RunConfig) -> Dict[str, Any]:
    solver = _solver(config)
    N, kept, regions = _load_panel(config)
    fit = fit_exact(N, kept, solver, _init_strategy(config))
    _write_fit(config, fit, kept, solver.cutoff)
    return {**fit.summary(), "metrics": _truth_metrics(fit.M, _load_truth(config, regions, kept))}


def cmd_fit_approx(config: RunConfig) -> Dict[str, Any]:
    solver = _solver(config)
    N, kept, regions = _load_panel(config)
    truth = _load_truth(config, regions, kept)
    fit = fit_approx(N, kept, solver, _outer_loop(config), truth)
    _write_fit(config, fit, kept, solver.cutoff)
    return {**fit.summary(), "metrics": _truth_metrics(fit.M, truth)}


def cmd_evaluate(config: RunConfig) -> Dict[str, Any]:
    """
    Score a flow file: NAE against a truth file, conservation against a
    count file, and inbound/outbound totals over --window steps.
    """
    _require(config, "flows", "centroids")
    regions = load_centroids(config.centroids)
    M = read_flows(config.flows, regions)
    result: Dict[str, Any] = {}

    if config.truth is not None:
        truth = read_flows(config.truth, regions)
        if truth.shape[0] > M.shape[0]:
            M = read_flows(config.flows, regions, truth.shape[0])
        elif M.shape[0] > truth.shape[0]:
            truth = read_flows(config.truth, regions, M.shape[0])
        result.update(_truth_metrics(M, truth))
        logger.info("NAE=%.6f off-diagonal NAE=%.6f", result["nae"], result["offdiag_nae"])

    if config.counts is not None:
        N, kept, _ = load_counts(config.counts, regions)
        if kept.n != regions.n:
            raise FlowInputError("Counts are incomplete for some regions; conservation needs all of them")
        result["conservation_cost"] = conservation_cost(M, N)

    if config.window is not None:
        summary = aggregate_inout(M, window_positions(config.window, M.shape[0]))
        summary.to_frame(regions.ids).to_csv(config.output_dir / "inout.csv", index=False)
        result["inout_window"] = list(summary.window)
        result["total_moved"] = float(summary.outbound.sum())

    return result


def _sweep_panels(config: RunConfig) -> List[Tuple[int, np.ndarray, RegionSet, Optional[np.ndarray]]]:
    """(seed, N, regions, truth) per panel: one per seed for a benchmark, else the input files."""
    seeds = config.seeds or [config.seed]
    if config.benchmark is not None:
        panels = []
        for seed in seeds:
            spec = scenario_by_name(config.benchmark, config.population, config.steps, config.noise, seed)
            truth = simulate(spec)
            panels.append((seed, truth.N, spec.regions, truth.M_true))
        return panels
    N, kept, regions = _load_panel(config)
    truth = _load_truth(config, regions, kept)
    return [(seed, N, kept, truth) for seed in seeds]


def cmd_sweep(config: RunConfig) -> Dict[str, Any]:
    """Fit every (algorithm, λ, ε, seed) combination and tabulate the metrics."""
    base = _solver(config)
    lambdas = config.lambdas or [base.lam]
    epsilons = config.epsilons or [base.epsilon]
    panels = _sweep_panels(config)

    grid = [(algorithm, lam, eps, panel) for algorithm in config.algorithms
            for lam in lambdas for eps in epsilons for panel in panels]
    rows = []
    for algorithm, lam, eps, (seed, N, regions, truth) in tqdm(grid, desc="sweep", unit="fit"):
        started = time.perf_counter()
        if algorithm == "exact":
            fit = fit_exact(N, regions, base.with_overrides(lam=lam, epsilon=eps, seed=seed),
                            _init_strategy(config, seed))
        elif algorithm == "approx":
            fit = fit_approx(N, regions, base.with_overrides(lam=lam, approx_tol=eps, seed=seed),
                             _outer_loop(config), truth)
        else:
            raise FlowInputError(f"Unknown algorithm {algorithm!r}; use 'exact' or 'approx'")
        metrics = _truth_metrics(fit.M, truth)
        rows.append({
            "algorithm": algorithm,
            "lambda": lam,
            "epsilon": eps,
            "seed": seed,
            "nae": metrics.get("nae", np.nan),
            "offdiag_nae": metrics.get("offdiag_nae", np.nan),
            "cost": conservation_cost(fit.M, N),
            "iterations": fit.iterations,
            "wall_time": time.perf_counter() - started,
        })

    table = pd.DataFrame(rows)
    table.to_csv(config.output_dir / "sweep.csv", index=False)
    return {"fits": len(rows), "best": table.sort_values("nae").iloc[0].to_dict() if rows else None}


def cmd_stability(config: RunConfig) -> Dict[str, Any]:
    """Repeat the exact fit from jittered starts and summarise the spread of every flow."""
    solver = _solver(config)
    N, kept, _ = _load_panel(config)
    mask = _admissible(kept, solver.cutoff)

    runs = [fit_exact(N, kept, solver, InitStrategy("static-jittered", seed)).M
            for seed in tqdm(range(config.runs), desc="stability", unit="run")]
    report = stability_report(runs, mask)
    write_json(config.output_dir / "stability.json", report.to_dict())
    report.histogram_table().to_csv(config.output_dir / "stability_histogram.csv", index=False)
    return report.to_dict()


COMMANDS: Dict[str, Callable[[RunConfig], Dict[str, Any]]] = {
    "simulate": cmd_simulate,
    "fit-exact": cmd_fit_exact,
    "fit-approx": cmd_fit_approx,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "stability": cmd_stability,
}


def run(config: RunConfig) -> int:
    """
    Execute one command and write its report.

    Returns:
        0 on success, 1 when the command failed (the report then carries an
        `error` section)
    """
    config.output_dir = Path(config.output_dir)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    report: Dict[str, Any] = {"command": config.command, "config": config.to_dict()}
    started = time.perf_counter()
    status = EXIT_OK

    try:
        if config.command not in COMMANDS:
            raise FlowInputError(f"Unknown command: {config.command}; use one of {sorted(COMMANDS)}")
        report["result"] = COMMANDS[config.command](config)
        report["status"] = "ok"
    except (FlowError, OSError, ValueError) as exc:
        logger.error("%s failed: %s", config.command, exc)
        logger.debug(traceback.format_exc())
        report["status"] = "error"
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
        status = EXIT_ERROR
    except Exception as exc:
        logger.exception("%s failed unexpectedly", config.command)
        report["status"] = "error"
        report["error"] = {"type": type(exc).__name__, "message": str(exc), "unexpected": True}
        status = EXIT_ERROR

    report["wall_time"] = time.perf_counter() - started
    write_json(config.output_dir / REPORT_NAME, report)
    return status
