"""
Command-line front end.

    PYTHONPATH=src python -m cli compare --scenario paper-vii --out runs/reference
    PYTHONPATH=src python -m cli track --scenario my.json --out runs/track \
        --seed 7 --set tracking.tau=10

Exit codes: 0 success, 2 configuration or validation error, 3 infeasible or
unsolved dispatch, 4 input/output error.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from artifact_writer import write_csv, write_json
from ensemble import save_ensemble
from envelope import (
    compare_architectures,
    comparison_frame,
    compute_envelope,
    dominance_frame,
    envelope_frame,
    envelope_plot_data,
    reduce_fleet,
)
from errors import (
    ConfigurationError,
    ConstraintError,
    DimensionError,
    EnsembleParseError,
    InfeasibleProblemError,
    NonConvexProblemError,
    SolverError,
)
from hull import reduce_class
from scenario_config import (
    ScenarioConfig,
    build_fleet,
    build_scenario,
    bundled_scenarios,
    fleet_summary,
    load_config,
    resolved_config,
    workers_from_env,
)
from tracking import (
    Disturbance,
    MeasurementModel,
    response_matrix_from_classes,
    rotating_reference,
    run_adaptation,
    tracking_frame,
    tracking_plot_data,
)

logger = logging.getLogger("vpp_sim")

COMMANDS = ("generate", "hull", "envelope", "compare", "track")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class RunConfig(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    scenario: str
    command: str
    out: Path = Path("out")
    seed: Optional[int] = None
    overrides: Tuple[str, ...] = ()
    z: Optional[float] = Field(None, ge=0)
    unconstrained: bool = False


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (EnsembleParseError, OSError)):
        return EXIT_IO
    if isinstance(error, (InfeasibleProblemError, SolverError)):
        return EXIT_SOLVER
    if isinstance(
        error,
        (
            ConfigurationError,
            ValidationError,
            ConstraintError,
            DimensionError,
            NonConvexProblemError,
        ),
    ):
        return EXIT_CONFIG
    return 1


def record_timings() -> bool:
    return os.environ.get("VPP_RECORD_TIMINGS", "false").lower() in ("1", "true", "yes")


def _generate(run: RunConfig, config: ScenarioConfig, classes, scenario) -> Dict[str, Any]:
    files = []
    for der in classes:
        files.append(save_ensemble(der, run.out / "ensembles" / f"{der.name}.csv").name)
    return {"ensembles": files}


def _hull(run: RunConfig, config: ScenarioConfig, classes, scenario) -> Dict[str, Any]:
    records, counts = [], {}
    for der in classes:
        _, hull = reduce_class(der, tol=config.hull.tol, workers=scenario.workers)
        counts[der.name] = len(hull.vertex_indices)
        for i, pair in enumerate(der.pairs):
            records.append(
                (
                    der.name,
                    pair.control,
                    i in hull.vertex_indices,
                    hull.residuals.get(i, 0.0),
                )
            )
    frame = pd.DataFrame.from_records(
        records, columns=["class", "control_id", "vertex", "residual_kw"]
    )
    write_csv(run.out / "hull.csv", frame)
    return {"hull_vertices": counts}


def _envelope(run: RunConfig, config: ScenarioConfig, classes, scenario) -> Dict[str, Any]:
    report = compute_envelope(scenario)
    write_csv(run.out / "envelope.csv", envelope_frame(report))
    write_json(run.out / "envelope-plot.json", envelope_plot_data(report))
    return {
        "architecture": report.architecture,
        "upper_objectives": report.series("upper_objective"),
        "lower_objectives": report.series("lower_objective"),
        "binding": {
            s.hour: sorted(set(s.upper_binding) | set(s.lower_binding)) for s in report.steps
        },
    }


def _compare(run: RunConfig, config: ScenarioConfig, classes, scenario) -> Dict[str, Any]:
    comparison = compare_architectures(scenario, reduce_fleet(scenario))
    write_csv(run.out / "comparison.csv", comparison_frame(comparison))
    write_csv(run.out / "dominance.csv", dominance_frame(comparison))
    write_json(
        run.out / "comparison-plot.json",
        envelope_plot_data(comparison.centralized, comparison.layered),
    )
    verdict = "centralized dominates" if comparison.dominates_every_hour else "not dominated"
    print(f"{verdict} in {sum(h.centralized_dominates for h in comparison.hours)}"
          f"/{len(comparison.hours)} hours")
    return {
        "dominance_verdict": verdict,
        "dominance_tolerance": comparison.tolerance,
        "hours_dominated": [h.hour for h in comparison.hours if h.centralized_dominates],
        "beta_layered": comparison.layered.beta,
        "objectives": {
            "centralized": {
                "upper": comparison.centralized.series("upper_objective"),
                "lower": comparison.centralized.series("lower_objective"),
            },
            "layered": {
                "upper": comparison.layered.series("upper_objective"),
                "lower": comparison.layered.series("lower_objective"),
            },
        },
    }


def _track(run: RunConfig, config: ScenarioConfig, classes, scenario) -> Dict[str, Any]:
    t = config.tracking
    reduced = [reduce_class(der, tol=config.hull.tol)[0] for der in classes]
    response = response_matrix_from_classes(reduced, max_partitions=t.partitions)
    references = rotating_reference(
        response.Y,
        t.days,
        scale=t.reference_scale,
        excitation=t.excitation,
        perturbation=t.perturbation,
        seed=config.seed,
    )
    disturbance = (
        Disturbance(day=t.disturbance_day, kind=t.disturbance_kind)
        if t.disturbance_day is not None
        else None
    )
    log = run_adaptation(
        response,
        references,
        t.days,
        tau=t.tau,
        disturbance=disturbance,
        model=MeasurementModel(epsilon_rel=t.epsilon_rel, seed=config.seed),
        simplex=t.simplex,
        cond_floor=t.cond_floor,
    )
    write_csv(run.out / "tracking.csv", tracking_frame(log))
    write_json(run.out / "tracking-plot.json", tracking_plot_data(log))
    return {
        "partitions": response.labels,
        "final_model_error_rel": log.records[-1].model_error_rel,
        "final_tracking_rmse_kw": log.records[-1].tracking_rmse_kw,
        "metadata": log.metadata,
    }


HANDLERS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "generate": _generate,
    "hull": _hull,
    "envelope": _envelope,
    "compare": _compare,
    "track": _track,
}


def run(run_config: RunConfig) -> int:
    """Execute one command and return its exit code; diagnostics go to stderr."""
    log_entry: Dict[str, Any] = {
        "command": run_config.command,
        "scenario": run_config.scenario,
        "seed": run_config.seed,
        "level": "info",
    }
    started = time.perf_counter()
    try:
        if run_config.command not in HANDLERS:
            raise ConfigurationError(
                f"Unknown command '{run_config.command}'. Valid commands are: {', '.join(COMMANDS)}"
            )
        config, base_dir = load_config(
            run_config.scenario,
            run_config.overrides,
            run_config.seed,
            confidence_z=run_config.z,
            unconstrained=run_config.unconstrained,
        )
        workers = workers_from_env()
        classes = build_fleet(config, base_dir)
        scenario = build_scenario(config, classes, workers=workers)
        write_json(run_config.out / "resolved-config.json", resolved_config(config, base_dir))

        phase_started = time.perf_counter()
        results = HANDLERS[run_config.command](run_config, config, classes, scenario)
        summary: Dict[str, Any] = {
            "command": run_config.command,
            "scenario": config.name,
            "seed": config.seed,
            "confidence_z": scenario.confidence_z,
            "fleet": fleet_summary(config, classes),
            "results": results,
        }
        if record_timings():
            summary["timings_s"] = {
                "command": time.perf_counter() - phase_started,
                "total": time.perf_counter() - started,
            }
        write_json(run_config.out / "run-summary.json", summary)
        exit_code = EXIT_OK
        log_entry["message"] = f"{run_config.command} finished, outputs in {run_config.out}"
    except Exception as e:
        exit_code = exit_code_for(e)
        if exit_code == 1:
            logger.exception("Unexpected error")
        log_entry["level"] = "error"
        log_entry["message"] = f"{type(e).__name__}: {e}"
        print(f"error: {e}", file=sys.stderr)

    log_entry["exit_code"] = exit_code
    if exit_code == EXIT_OK:
        logger.info(json.dumps(log_entry))
    else:
        logger.error(json.dumps(log_entry))
    return exit_code


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="vpp-sim",
        description="Centralized vs layered VPP aggregation: envelopes, comparison and tracking.",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS, help="what to run")
    parser.add_argument(
        "--scenario", default="paper-vii", help="scenario JSON file or bundled scenario name"
    )
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a scenario setting by dotted path, e.g. dispatch.lam=0.2",
    )
    parser.add_argument("--z", type=float, default=None, help="confidence multiplier")
    parser.add_argument(
        "--unconstrained",
        action="store_true",
        help="fit tracking weights without the convex-partition constraint",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument(
        "--list-scenarios", action="store_true", help="print bundled scenario names"
    )
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    if args.list_scenarios:
        for name in bundled_scenarios():
            print(name)
        return EXIT_OK
    if args.command is None:
        print("error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run_config = RunConfig(
            scenario=args.scenario,
            command=args.command,
            out=args.out,
            seed=args.seed,
            overrides=tuple(args.overrides),
            z=args.z,
            unconstrained=args.unconstrained,
        )
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return run(run_config)


if __name__ == "__main__":
    sys.exit(main())
