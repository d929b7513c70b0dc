"""
Command-line entry point for the flow inference engine.

    python app.py simulate --benchmark ring --population 1e4 --output-dir out/sim
    python app.py fit-exact --counts out/sim/counts.csv --centroids out/sim/centroids.csv \
        --cutoff 1.5 --lambda 10 --output-dir out/exact
    python app.py evaluate --flows out/exact/flows.csv --truth out/sim/truth_flows.csv \
        --centroids out/sim/centroids.csv --output-dir out/eval
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from cli.commands import COMMANDS, REPORT_NAME, run
from config.settings import RunConfig, Settings
from data.readers import write_json

logger = logging.getLogger(__name__)


def _floats(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _ints(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _words(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowinfer",
        description="Infer origin-destination flows from regional population counts.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="KEY=VALUE settings file")
    parser.add_argument("--output-dir", type=Path, default=Path("out"))
    parser.add_argument("--debug", action="store_true", default=None)

    inputs = parser.add_argument_group("inputs")
    inputs.add_argument("--counts", type=Path)
    inputs.add_argument("--centroids", type=Path)
    inputs.add_argument("--truth", type=Path, help="true flows CSV for NAE reporting")
    inputs.add_argument("--flows", type=Path, help="fitted flows CSV (evaluate)")
    inputs.add_argument("--scenario", type=Path, help="scenario JSON (simulate)")
    inputs.add_argument("--window", help="start:stop snapshot (fits) or step (evaluate) selection")

    solver = parser.add_argument_group("solver")
    solver.add_argument("--cutoff", type=float, help="travel cutoff K in centroid units")
    solver.add_argument("--lambda", dest="lam", type=float)
    solver.add_argument("--epsilon", type=float)
    solver.add_argument("--scaling", choices=["auto", "factor", "off"])
    solver.add_argument("--scale-factor", type=float)
    solver.add_argument("--lambda-rule", choices=["linear", "quadratic"])
    solver.add_argument("--target-min-flow", type=float)
    solver.add_argument("--beta-bounds", help="low,high")
    solver.add_argument("--max-outer", type=int)
    solver.add_argument("--max-inner", type=int)
    solver.add_argument("--approx-tol", type=float)
    solver.add_argument("--seed", type=int)
    solver.add_argument("--init", choices=["static", "static-jittered", "moving"])
    solver.add_argument("--outer-rounds", type=int)
    solver.add_argument("--nae-target", type=float)
    solver.add_argument("--m-change-tol", type=float)

    studies = parser.add_argument_group("simulation and studies")
    studies.add_argument("--benchmark", choices=["grid", "ring"])
    studies.add_argument("--population", type=float, default=1e4, help="ring population scale")
    studies.add_argument("--steps", type=int, default=3)
    studies.add_argument("--noise", type=float, default=0.0, help="relative count noise per step")
    studies.add_argument("--lambdas", type=_floats, default=[])
    studies.add_argument("--epsilons", type=_floats, default=[])
    studies.add_argument("--seeds", type=_ints, default=[])
    studies.add_argument("--algorithms", type=_words, default=["exact"])
    studies.add_argument("--runs", type=int, default=20, help="jittered fits for stability")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Resolve flags and the optional config file into a RunConfig."""
    beta_bounds = tuple(_floats(args.beta_bounds)) if args.beta_bounds else None
    settings = Settings(args.config, overrides={
        "CUTOFF": args.cutoff,
        "LAMBDA": args.lam,
        "EPSILON": args.epsilon,
        "SCALING": args.scaling,
        "SCALE_FACTOR": args.scale_factor,
        "LAMBDA_RULE": args.lambda_rule,
        "TARGET_MIN_FLOW": args.target_min_flow,
        "BETA_BOUNDS": beta_bounds,
        "MAX_OUTER": args.max_outer,
        "MAX_INNER": args.max_inner,
        "APPROX_TOL": args.approx_tol,
        "SEED": args.seed,
        "INIT": args.init,
        "OUTER_ROUNDS": args.outer_rounds,
        "NAE_TARGET": args.nae_target,
        "M_CHANGE_TOL": args.m_change_tol,
        "WINDOW": args.window,
        "DEBUG": args.debug,
    })
    logger.debug("Resolved %r", settings)

    solver = settings.solver_config() if settings.get("CUTOFF") is not None else None
    return RunConfig(
        command=args.command,
        output_dir=args.output_dir,
        solver=solver,
        counts=args.counts,
        centroids=args.centroids,
        truth=args.truth,
        flows=args.flows,
        scenario=args.scenario,
        benchmark=args.benchmark,
        population=args.population,
        steps=args.steps,
        noise=args.noise,
        lambdas=args.lambdas,
        epsilons=args.epsilons,
        seeds=args.seeds,
        algorithms=args.algorithms,
        runs=args.runs,
        seed=settings.get("SEED", 0),
        **settings.run_fields(),
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = build_config(args)
    except ValueError as exc:
        logger.error("Invalid configuration: %s", exc)
        args.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(args.output_dir / REPORT_NAME, {
            "command": args.command,
            "status": "error",
            "error": {"type": type(exc).__name__, "message": str(exc)},
        })
        return 1

    status = run(config)
    print(f"{config.command}: {'ok' if status == 0 else 'failed'} (report: {config.output_dir / REPORT_NAME})")
    return status


if __name__ == "__main__":
    sys.exit(main())
