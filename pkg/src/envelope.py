"""
Hourly performance envelope of a VPP and the centralized/layered comparison.

Upper envelope: Bound = -1 (maximise load-up), reported as mean and the
one-sided guarantee mean - z*sd. Lower envelope: Bound = +1 (maximise shed or
export), reported as mean and mean + z*sd. Load-up is positive kW.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from dispatch import (
    Architecture,
    DispatchPlan,
    ObjectiveParams,
    apply_architecture,
    build_multi_type_qp,
    check_beta,
    default_beta,
    solve_qp,
)
from ensemble import DerClass, LoadShapePair, TimeGrid
from errors import DimensionError, VppError
from hull import DEFAULT_TOL, reduce_class

logger = logging.getLogger(__name__)

ENVELOPE_COLUMNS = ["hour", "arch", "bound", "mean_kw", "conf_kw", "objective", "binding"]
DOMINANCE_COLUMNS = [
    "hour",
    "bound",
    "centralized_objective",
    "layered_objective",
    "delta",
    "centralized_dominates",
]


class Scenario(BaseModel):
    model_config = {"frozen": True}

    classes: Tuple[DerClass, ...] = ()
    grid: TimeGrid = Field(default_factory=TimeGrid)
    lam: float = Field(0.1, ge=0)
    rho: Optional[float] = Field(None, ge=0, le=1, description="overrides class rho")
    budget: float = Field(math.inf, ge=0)
    beta: Optional[Tuple[float, ...]] = None
    confidence_z: float = Field(1.645, ge=0)
    architecture: Architecture = Architecture.CENTRALIZED
    hull_tol: float = Field(DEFAULT_TOL, ge=0)
    solver_tol: float = Field(1e-8, gt=0)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "Scenario":
        for der in self.classes:
            if der.steps != self.grid.steps_per_period:
                raise DimensionError(
                    f"class '{der.name}' has {der.steps} steps, "
                    f"grid has {self.grid.steps_per_period}"
                )
        names = [der.name for der in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("DER class names must be unique")
        if self.beta is not None:
            check_beta(self.beta, len(self.classes))
        return self

    def effective_beta(self) -> Optional[Tuple[float, ...]]:
        if not self.classes:
            return None
        if self.beta is not None:
            return self.beta
        return tuple(float(b) for b in default_beta(self.classes))


class EnvelopeStep(BaseModel):
    model_config = {"frozen": True}

    hour: int
    upper_mean: float
    lower_mean: float
    upper_conf: float
    lower_conf: float
    upper_variance: float
    lower_variance: float
    upper_objective: float
    lower_objective: float
    upper_binding: Tuple[str, ...] = ()
    lower_binding: Tuple[str, ...] = ()


class EnvelopeReport(BaseModel):
    model_config = {"frozen": True}

    architecture: Architecture
    confidence_z: float
    lam: float
    rho: Optional[float]
    budget: float
    beta: Optional[Tuple[float, ...]]
    steps: Tuple[EnvelopeStep, ...]

    def series(self, field: str) -> np.ndarray:
        return np.array([getattr(s, field) for s in self.steps])


class HourComparison(BaseModel):
    model_config = {"frozen": True}

    hour: int
    upper_delta: float
    lower_delta: float
    centralized_dominates: bool


class Comparison(BaseModel):
    model_config = {"frozen": True}

    centralized: EnvelopeReport
    layered: EnvelopeReport
    hours: Tuple[HourComparison, ...]
    tolerance: float

    @property
    def dominates_every_hour(self) -> bool:
        return all(h.centralized_dominates for h in self.hours)


def reduce_fleet(scenario: Scenario) -> List[List[LoadShapePair]]:
    """Hull vertices of every DER class, in class order."""
    vertices = []
    for der in scenario.classes:
        reduced, _ = reduce_class(der, tol=scenario.hull_tol, workers=scenario.workers)
        vertices.append(list(reduced.pairs))
    return vertices


def _solve_step(
    scenario: Scenario,
    vertices: Sequence[Sequence[LoadShapePair]],
    k: int,
    bound: int,
) -> DispatchPlan:
    params = ObjectiveParams(
        bound=bound, lam=scenario.lam, time_index=k, confidence_z=scenario.confidence_z
    )
    try:
        problem = build_multi_type_qp(scenario.classes, vertices, params, rho=scenario.rho)
        problem = apply_architecture(
            problem, scenario.architecture, scenario.budget, beta=scenario.beta
        )
        return solve_qp(problem, tol=scenario.solver_tol)
    except VppError as e:
        raise e.with_context(f"{scenario.architecture.value} step {k}, bound {bound:+d}")


def _envelope_step(scenario: Scenario, vertices, k: int) -> EnvelopeStep:
    if not scenario.classes:
        return EnvelopeStep(
            hour=k,
            upper_mean=0.0,
            lower_mean=0.0,
            upper_conf=0.0,
            lower_conf=0.0,
            upper_variance=0.0,
            lower_variance=0.0,
            upper_objective=0.0,
            lower_objective=0.0,
        )
    up = _solve_step(scenario, vertices, k, -1)
    down = _solve_step(scenario, vertices, k, 1)
    z = scenario.confidence_z
    if down.mean_kw > up.mean_kw + 1e-9 * (1 + abs(up.mean_kw)):
        logger.warning(
            f"Step {k}: lower mean {down.mean_kw:.6g} exceeds upper mean {up.mean_kw:.6g}"
        )
    return EnvelopeStep(
        hour=k,
        upper_mean=up.mean_kw,
        lower_mean=down.mean_kw,
        upper_conf=up.mean_kw - z * math.sqrt(max(up.variance_kw2, 0.0)),
        lower_conf=down.mean_kw + z * math.sqrt(max(down.variance_kw2, 0.0)),
        upper_variance=up.variance_kw2,
        lower_variance=down.variance_kw2,
        upper_objective=up.objective,
        lower_objective=down.objective,
        upper_binding=up.active_constraints,
        lower_binding=down.active_constraints,
    )


def compute_envelope(
    scenario: Scenario, vertices: Optional[Sequence[Sequence[LoadShapePair]]] = None
) -> EnvelopeReport:
    """
    Solve both bounds at every step of the period.

    `vertices` may carry precomputed hull vertices per class; otherwise each
    class is reduced first.
    """
    if vertices is None:
        vertices = reduce_fleet(scenario)
    hours = range(scenario.grid.steps_per_period)
    if scenario.workers > 1:
        with ThreadPoolExecutor(max_workers=scenario.workers) as pool:
            steps = list(pool.map(lambda k: _envelope_step(scenario, vertices, k), hours))
    else:
        steps = [_envelope_step(scenario, vertices, k) for k in hours]
    logger.info(
        f"Computed {scenario.architecture.value} envelope over {len(steps)} steps "
        f"(budget {scenario.budget:g}, z {scenario.confidence_z:g})"
    )
    return EnvelopeReport(
        architecture=scenario.architecture,
        confidence_z=scenario.confidence_z,
        lam=scenario.lam,
        rho=scenario.rho,
        budget=scenario.budget,
        beta=(
            scenario.effective_beta()
            if scenario.architecture == Architecture.LAYERED
            else None
        ),
        steps=tuple(steps),
    )


def compare_architectures(
    scenario_base: Scenario,
    vertices: Optional[Sequence[Sequence[LoadShapePair]]] = None,
) -> Comparison:
    """
    Envelopes under both architectures on the same fleet.

    Deltas are centralized minus layered objective; centralized dominates an hour
    when neither delta exceeds twice the solver tolerance, scaled to the
    objective's magnitude.
    """
    if vertices is None:
        vertices = reduce_fleet(scenario_base)
    reports: Dict[Architecture, EnvelopeReport] = {}
    for arch in (Architecture.CENTRALIZED, Architecture.LAYERED):
        scenario = scenario_base.model_copy(update={"architecture": arch})
        reports[arch] = compute_envelope(scenario, vertices)

    central, layered = reports[Architecture.CENTRALIZED], reports[Architecture.LAYERED]
    tol = 2 * scenario_base.solver_tol
    hours = []
    for c, lay in zip(central.steps, layered.steps):
        upper_delta = c.upper_objective - lay.upper_objective
        lower_delta = c.lower_objective - lay.lower_objective
        slack_up = tol * (1 + abs(lay.upper_objective))
        slack_down = tol * (1 + abs(lay.lower_objective))
        hours.append(
            HourComparison(
                hour=c.hour,
                upper_delta=upper_delta,
                lower_delta=lower_delta,
                centralized_dominates=upper_delta <= slack_up and lower_delta <= slack_down,
            )
        )
    failing = [h.hour for h in hours if not h.centralized_dominates]
    if failing:
        logger.warning(f"Layered aggregation beats centralized at hours {failing}")
    return Comparison(
        centralized=central, layered=layered, hours=tuple(hours), tolerance=tol
    )


def envelope_frame(report: EnvelopeReport) -> pd.DataFrame:
    records = []
    for s in report.steps:
        records.append(
            (
                s.hour,
                report.architecture.value,
                "upper",
                s.upper_mean,
                s.upper_conf,
                s.upper_objective,
                ";".join(s.upper_binding),
            )
        )
        records.append(
            (
                s.hour,
                report.architecture.value,
                "lower",
                s.lower_mean,
                s.lower_conf,
                s.lower_objective,
                ";".join(s.lower_binding),
            )
        )
    return pd.DataFrame.from_records(records, columns=ENVELOPE_COLUMNS)


def comparison_frame(comparison: Comparison) -> pd.DataFrame:
    return pd.concat(
        [envelope_frame(comparison.centralized), envelope_frame(comparison.layered)],
        ignore_index=True,
    )


def dominance_frame(comparison: Comparison) -> pd.DataFrame:
    records = []
    for h, c, lay in zip(comparison.hours, comparison.centralized.steps, comparison.layered.steps):
        records.append(
            (h.hour, "upper", c.upper_objective, lay.upper_objective, h.upper_delta,
             h.centralized_dominates)
        )
        records.append(
            (h.hour, "lower", c.lower_objective, lay.lower_objective, h.lower_delta,
             h.centralized_dominates)
        )
    return pd.DataFrame.from_records(records, columns=DOMINANCE_COLUMNS)


def _plot_series(report: EnvelopeReport) -> dict:
    return {
        "upper_mean_kw": report.series("upper_mean").tolist(),
        "upper_conf_kw": report.series("upper_conf").tolist(),
        "lower_mean_kw": report.series("lower_mean").tolist(),
        "lower_conf_kw": report.series("lower_conf").tolist(),
    }


def envelope_plot_data(*reports: EnvelopeReport) -> dict:
    """Per-architecture series for external plotting tools."""
    if not reports:
        return {"hours": [], "series": {}, "metadata": {}}
    first = reports[0]
    return {
        "hours": [s.hour for s in first.steps],
        "series": {r.architecture.value: _plot_series(r) for r in reports},
        "metadata": {
            "confidence_z": first.confidence_z,
            "lam": first.lam,
            "rho": first.rho,
            "budget": first.budget,
            "beta": next((r.beta for r in reports if r.beta is not None), None),
            "sign_convention": "load-up positive kW, shed/export negative kW",
        },
    }
