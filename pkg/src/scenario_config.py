"""
Scenario files: versioned JSON validated by pydantic, with dotted-path overrides.

A scenario names its fleet (synthetic archetypes or ensemble CSV files), the
dispatch parameters, and the tracking experiment. Bundled scenarios live in
`scenarios/` next to `src/` and can be referenced by name.
"""

import copy
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from archetypes import Archetype
from dispatch import Architecture
from ensemble import (
    ConditionKey,
    DerClass,
    SyntheticSpec,
    TimeGrid,
    generate_synthetic,
    load_ensemble,
)
from envelope import Scenario
from errors import ConfigurationError
from tracking import DisturbanceKind

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

script_dir = os.path.dirname(os.path.abspath(__file__))
BUNDLED_SCENARIO_DIR = os.environ.get(
    "VPP_SCENARIO_DIR", os.path.join(script_dir, "..", "scenarios")
)


class _Section(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}


class ClassConfig(_Section):
    name: str = Field(..., min_length=1)
    archetype: Optional[Archetype] = None
    ensemble_file: Optional[str] = None
    n_total: int = Field(..., ge=0)
    n_sequences: int = Field(6, ge=1)
    noise_scale: float = Field(0.1, ge=0)
    include_null: bool = True
    window: Optional[Tuple[float, float]] = None
    unit_dispatch_cost: Optional[float] = Field(None, ge=0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _one_source(self) -> "ClassConfig":
        if (self.archetype is None) == (self.ensemble_file is None):
            raise ValueError(
                f"class '{self.name}' needs exactly one of 'archetype' or 'ensemble_file'"
            )
        return self


class FleetConfig(_Section):
    classes: Tuple[ClassConfig, ...] = ()
    cost_range: Tuple[float, float] = (0.15, 0.50)
    cost_seed: int = 0

    @field_validator("cost_range")
    @classmethod
    def _ordered(cls, v):
        if not 0 <= v[0] <= v[1]:
            raise ValueError("cost_range must be an ordered pair of nonnegative costs")
        return v


class DispatchConfig(_Section):
    lam: float = Field(0.1, ge=0)
    rho: float = Field(0.1, ge=0, le=1)
    budget: float = Field(math.inf, ge=0)
    beta: Optional[Tuple[float, ...]] = None
    confidence_z: float = Field(1.645, ge=0)
    architecture: Architecture = Architecture.CENTRALIZED

    @field_validator("budget", mode="before")
    @classmethod
    def _budget(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("inf", "infinity", "unlimited"):
            return math.inf
        return v


class HullConfig(_Section):
    tol: float = Field(1e-9, ge=0)


class SolverConfig(_Section):
    tol: float = Field(1e-8, gt=0)


class TrackingConfig(_Section):
    days: int = Field(60, ge=1)
    tau: float = Field(7.0, gt=0)
    epsilon_rel: float = Field(0.02, ge=0)
    disturbance_day: Optional[int] = Field(30, ge=0)
    disturbance_kind: DisturbanceKind = DisturbanceKind.PERMUTE
    partitions: int = Field(3, ge=1)
    reference_scale: float = Field(0.9, gt=0, le=1)
    excitation: float = Field(0.4, ge=0, le=1)
    perturbation: float = Field(0.05, ge=0)
    cond_floor: float = Field(1e-3, gt=0)
    simplex: bool = True

    @model_validator(mode="after")
    def _within_horizon(self) -> "TrackingConfig":
        if self.disturbance_day is not None and self.disturbance_day >= self.days:
            raise ValueError(
                f"disturbance_day {self.disturbance_day} is outside the {self.days}-day horizon"
            )
        if self.disturbance_kind == DisturbanceKind.REPLACE:
            raise ValueError("scenario files support only the 'permute' disturbance")
        return self


class ScenarioConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    name: str = "scenario"
    seed: int = 0
    grid: TimeGrid = Field(default_factory=TimeGrid)
    condition: ConditionKey = Field(default_factory=ConditionKey)
    fleet: FleetConfig = Field(default_factory=FleetConfig)
    dispatch: DispatchConfig = Field(default_factory=DispatchConfig)
    hull: HullConfig = Field(default_factory=HullConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    @field_validator("schema_version")
    @classmethod
    def _supported(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _check_beta(self) -> "ScenarioConfig":
        beta = self.dispatch.beta
        if beta is not None and len(beta) != len(self.fleet.classes):
            raise ValueError(
                f"dispatch.beta has {len(beta)} shares for {len(self.fleet.classes)} classes"
            )
        return self


def bundled_scenarios() -> List[str]:
    if not os.path.isdir(BUNDLED_SCENARIO_DIR):
        return []
    return sorted(Path(p).stem for p in Path(BUNDLED_SCENARIO_DIR).glob("*.json"))


def resolve_scenario_path(scenario: str | os.PathLike) -> Path:
    """A scenario file path, or the name of a bundled scenario."""
    path = Path(scenario)
    if path.is_file():
        return path
    bundled = Path(BUNDLED_SCENARIO_DIR) / f"{path.name}.json"
    if path.suffix == "" and bundled.is_file():
        return bundled
    raise FileNotFoundError(f"Scenario not found: {os.path.abspath(path)}")


def read_scenario_file(scenario: str | os.PathLike) -> Tuple[Dict[str, Any], Path]:
    """Raw scenario document and the directory relative paths resolve against."""
    path = resolve_scenario_path(scenario)
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must contain a JSON object")
    logger.info(f"Loaded scenario from {os.path.abspath(path)}")
    return raw, path.parent


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply `key=value` overrides addressed by dotted path (`dispatch.lam=0.2`,
    `fleet.classes.0.n_total=600`). Values are JSON when they parse as JSON.
    Missing mapping keys are created so that schema validation reports them.
    """
    doc = copy.deepcopy(raw)
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        parts = key.strip().split(".")
        node: Any = doc
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigurationError(f"override '{key}': no list element '{part}'")
                if last:
                    node[idx] = _parse_value(text)
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if last:
                    node[part] = _parse_value(text)
                else:
                    node = node.setdefault(part, {})
            else:
                raise ConfigurationError(f"override '{key}': '{part}' is not a section")
        logger.debug(f"Override {key} = {text}")
    return doc


def load_config(
    scenario: str | os.PathLike,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    confidence_z: Optional[float] = None,
    unconstrained: bool = False,
) -> Tuple[ScenarioConfig, Path]:
    """
    Validated scenario with `--set` overrides applied, followed by the command-line
    seed, confidence multiplier and tracking mode, so the resolved echo of the
    result reproduces the run without any flags.
    """
    raw, base_dir = read_scenario_file(scenario)
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if confidence_z is not None:
        raw.setdefault("dispatch", {})["confidence_z"] = confidence_z
    if unconstrained:
        raw.setdefault("tracking", {})["simplex"] = False
    return ScenarioConfig.model_validate(raw), base_dir


def class_seed(config: ScenarioConfig, index: int) -> int:
    cls = config.fleet.classes[index]
    return cls.seed if cls.seed is not None else config.seed * 1000 + index


def sampled_costs(config: ScenarioConfig) -> np.ndarray:
    """Unit cost per class: configured value, else drawn uniformly from cost_range."""
    low, high = config.fleet.cost_range
    rng = np.random.default_rng(config.fleet.cost_seed)
    draws = rng.uniform(low, high, size=len(config.fleet.classes))
    return np.array(
        [
            c.unit_dispatch_cost if c.unit_dispatch_cost is not None else float(d)
            for c, d in zip(config.fleet.classes, draws)
        ]
    )


def build_fleet(config: ScenarioConfig, base_dir: Path = Path(".")) -> List[DerClass]:
    costs = sampled_costs(config)
    classes = []
    for i, cls in enumerate(config.fleet.classes):
        common = dict(
            name=cls.name,
            n_total=cls.n_total,
            unit_dispatch_cost=float(costs[i]),
            rho=config.dispatch.rho,
        )
        if cls.ensemble_file is not None:
            path = Path(cls.ensemble_file)
            if not path.is_absolute():
                path = base_dir / path
            der = load_ensemble(path, **common)
            if der.condition != config.condition:
                raise ConfigurationError(
                    f"class '{cls.name}' was recorded under condition "
                    f"'{der.condition.label}', scenario uses '{config.condition.label}'"
                )
        else:
            spec = SyntheticSpec(
                archetype=cls.archetype,
                n_sequences=cls.n_sequences,
                noise_scale=cls.noise_scale,
                seed=class_seed(config, i),
                include_null=cls.include_null,
                window=cls.window,
                condition=config.condition,
            )
            der = generate_synthetic(spec, config.grid, **common)
        classes.append(der)
    return classes


def workers_from_env() -> int:
    raw = os.environ.get("VPP_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"VPP_WORKERS must be an integer, got '{raw}'")
    if workers < 1:
        raise ConfigurationError(f"VPP_WORKERS must be at least 1, got {workers}")
    return workers


def build_scenario(
    config: ScenarioConfig,
    classes: Sequence[DerClass],
    workers: int = 1,
) -> Scenario:
    d = config.dispatch
    return Scenario(
        classes=tuple(classes),
        grid=config.grid,
        lam=d.lam,
        rho=d.rho,
        budget=d.budget,
        beta=d.beta,
        confidence_z=d.confidence_z,
        architecture=d.architecture,
        hull_tol=config.hull.tol,
        solver_tol=config.solver.tol,
        workers=workers,
    )


def resolved_config(config: ScenarioConfig, base_dir: Path = Path(".")) -> Dict[str, Any]:
    """
    Every setting with defaults filled in; loadable as a scenario file. Ensemble
    file paths are made absolute so the echo works from any directory.
    """
    doc = config.model_dump(mode="python")
    for cls in doc["fleet"]["classes"]:
        if cls["ensemble_file"] is not None and not os.path.isabs(cls["ensemble_file"]):
            cls["ensemble_file"] = os.path.abspath(base_dir / cls["ensemble_file"])
    return doc


def fleet_summary(config: ScenarioConfig, classes: Sequence[DerClass]) -> List[Dict[str, Any]]:
    return [
        {
            "name": der.name,
            "n_total": der.n_total,
            "unit_dispatch_cost": der.unit_dispatch_cost,
            "sequences": len(der.pairs),
            "seed": None if cfg.archetype is None else class_seed(config, i),
        }
        for i, (cfg, der) in enumerate(zip(config.fleet.classes, classes))
    ]
