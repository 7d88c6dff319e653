"""
DER flexibility as sets of periodic (mean, variance) load-shape pairs.

Power is kW per device relative to baseline, variance is kW^2 per device.
All types are frozen pydantic models holding read-only numpy arrays, so they
can be shared between threads.
"""

import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from archetypes import Archetype, build_sequence
from artifact_writer import write_csv
from errors import ConfigurationError, ConstraintError, DimensionError, EnsembleParseError

logger = logging.getLogger(__name__)

ENSEMBLE_COLUMNS = ["control_id", "condition", "step", "mean_kw", "variance_kw2"]
SIMPLEX_TOL = 1e-12
CONDITION_SEPARATOR = "/"


def frozen_array(value, ndim: int = 1) -> np.ndarray:
    """Coerce to a read-only float64 array with `ndim` dimensions."""
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    arr.setflags(write=False)
    return arr


class TimeGrid(BaseModel):
    """Discretisation of one periodic interval that starts at the daily reset."""

    model_config = {"frozen": True}

    steps_per_period: int = Field(24, gt=0)
    step_hours: float = Field(1.0, gt=0)
    reset_hour: float = Field(0.0, ge=0, lt=24)

    @model_validator(mode="after")
    def _check_period(self) -> "TimeGrid":
        period = self.period_hours
        if abs(period - 48.0) < 1e-9:
            return self
        ratio = 24.0 / period
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                f"period of {period} h neither divides 24 h evenly nor equals 48 h"
            )
        return self

    @property
    def period_hours(self) -> float:
        return self.steps_per_period * self.step_hours

    def step_clock_hour(self, k: int) -> float:
        return (self.reset_hour + k * self.step_hours) % 24.0


class ConditionKey(BaseModel):
    """Reset state and weather condition shared by every pair in one analysis."""

    model_config = {"frozen": True}

    reset_state_label: str = Field("midnight", min_length=1)
    weather_label: str = Field("typical", min_length=1)

    @field_validator("reset_state_label", "weather_label")
    @classmethod
    def _no_separator(cls, v: str) -> str:
        if CONDITION_SEPARATOR in v:
            raise ValueError(f"label may not contain '{CONDITION_SEPARATOR}'")
        return v

    @property
    def label(self) -> str:
        return f"{self.reset_state_label}{CONDITION_SEPARATOR}{self.weather_label}"

    @classmethod
    def from_label(cls, label: str) -> "ConditionKey":
        parts = label.split(CONDITION_SEPARATOR)
        if len(parts) != 2:
            raise ValueError(
                f"condition '{label}' must look like 'reset{CONDITION_SEPARATOR}weather'"
            )
        return cls(reset_state_label=parts[0], weather_label=parts[1])


class LoadShapePair(BaseModel):
    """Mean load shape and per-device variance for one control sequence."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    control: str = Field(..., min_length=1)
    condition: ConditionKey = Field(default_factory=ConditionKey)
    mean: np.ndarray
    variance: np.ndarray

    @field_validator("mean", "variance", mode="before")
    @classmethod
    def _as_vector(cls, v):
        return frozen_array(v)

    @model_validator(mode="after")
    def _check_shapes(self) -> "LoadShapePair":
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean has {self.mean.size} steps but variance has {self.variance.size}"
            )
        if np.any(self.variance < 0):
            raise ValueError(f"negative variance in sequence '{self.control}'")
        return self

    @property
    def steps(self) -> int:
        return int(self.mean.size)

    @property
    def is_null(self) -> bool:
        """True for the no-dispatch sequence (all-zero mean)."""
        return bool(np.all(self.mean == 0.0))


class DerClass(BaseModel):
    """A homogeneous DER type and its ensemble of load-shape pairs."""

    model_config = {"frozen": True}

    name: str = Field(..., min_length=1)
    n_total: int = Field(0, ge=0)
    unit_dispatch_cost: float = Field(0.0, ge=0)
    rho: float = Field(0.1, ge=0, le=1)
    pairs: Tuple[LoadShapePair, ...]

    @model_validator(mode="after")
    def _check_pairs(self) -> "DerClass":
        if not self.pairs:
            raise ValueError(f"DER class '{self.name}' has an empty ensemble")
        lengths = {p.steps for p in self.pairs}
        if len(lengths) != 1:
            raise ValueError(f"DER class '{self.name}' mixes lengths {sorted(lengths)}")
        controls = [p.control for p in self.pairs]
        if len(set(controls)) != len(controls):
            raise ValueError(f"DER class '{self.name}' repeats a control sequence id")
        conditions = {p.condition for p in self.pairs}
        if len(conditions) != 1:
            raise ValueError(f"DER class '{self.name}' mixes condition keys")
        return self

    @property
    def steps(self) -> int:
        return self.pairs[0].steps

    @property
    def condition(self) -> ConditionKey:
        return self.pairs[0].condition

    def means(self) -> np.ndarray:
        return np.vstack([p.mean for p in self.pairs])

    def variances(self) -> np.ndarray:
        return np.vstack([p.variance for p in self.pairs])

    def vertices_billable(self) -> np.ndarray:
        """Per-event cost applies to every sequence except the null control."""
        return np.array([not p.is_null for p in self.pairs], dtype=bool)


class SyntheticSpec(BaseModel):
    """Parameters of a synthetic archetype ensemble."""

    model_config = {"frozen": True}

    archetype: Archetype
    n_sequences: int = Field(8, ge=1)
    noise_scale: float = Field(0.1, ge=0)
    seed: int = 0
    include_null: bool = True
    window: Optional[Tuple[float, float]] = None
    condition: ConditionKey = Field(default_factory=ConditionKey)

    @field_validator("archetype", mode="before")
    @classmethod
    def _known_archetype(cls, v):
        if isinstance(v, Archetype):
            return v
        try:
            return Archetype(v)
        except ValueError:
            valid = ", ".join(a.value for a in Archetype)
            raise ConfigurationError(
                f"Unknown archetype '{v}'. Valid archetypes are: {valid}"
            )


def scale_mean(pair: LoadShapePair, alpha: float) -> np.ndarray:
    """Mean response of a randomly sampled fraction `alpha` of the devices."""
    if alpha < 0:
        raise ConstraintError(f"scaling fraction must be nonnegative, got {alpha}")
    return alpha * pair.mean


def mix(pairs: Sequence[LoadShapePair], weights: Sequence[float]) -> np.ndarray:
    """Aggregate mean of a convex partition of the fleet across `pairs`."""
    if len(pairs) == 0:
        raise DimensionError("cannot mix an empty list of pairs")
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size != len(pairs):
        raise DimensionError(f"{w.size} weights given for {len(pairs)} pairs")
    lengths = {p.steps for p in pairs}
    if len(lengths) != 1:
        raise DimensionError(f"pairs have different lengths {sorted(lengths)}")
    if len({p.condition for p in pairs}) != 1:
        raise ConstraintError("pairs to mix must share one condition key")
    if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ConstraintError(
            f"weights must be nonnegative and sum to 1, got sum {w.sum()!r}"
        )
    return w @ np.vstack([p.mean for p in pairs])


def generate_synthetic(
    spec: SyntheticSpec,
    grid: TimeGrid,
    name: Optional[str] = None,
    n_total: int = 0,
    unit_dispatch_cost: float = 0.0,
    rho: float = 0.1,
) -> DerClass:
    """
    Deterministic synthetic ensemble for one archetype.

    Sequence 0 is the null control when `include_null` is set and more than one
    sequence is requested.
    """
    rng = np.random.default_rng(spec.seed)
    steps = grid.steps_per_period
    with_null = spec.include_null and spec.n_sequences > 1
    pairs: List[LoadShapePair] = []
    if with_null:
        pairs.append(
            LoadShapePair(
                control=f"{spec.archetype.value}-null",
                condition=spec.condition,
                mean=np.zeros(steps),
                variance=np.zeros(steps),
            )
        )
    for i in range(spec.n_sequences - len(pairs)):
        mean, variance = build_sequence(
            spec.archetype,
            rng,
            steps,
            grid.step_hours,
            grid.reset_hour,
            spec.noise_scale,
            spec.window,
        )
        pairs.append(
            LoadShapePair(
                control=f"{spec.archetype.value}-{i:02d}",
                condition=spec.condition,
                mean=mean,
                variance=variance,
            )
        )
    logger.debug(
        f"Generated {len(pairs)} {spec.archetype.value} sequences (seed {spec.seed})"
    )
    return DerClass(
        name=name or spec.archetype.value,
        n_total=n_total,
        unit_dispatch_cost=unit_dispatch_cost,
        rho=rho,
        pairs=tuple(pairs),
    )


def _parse_float(raw: str, row: int, column: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise EnsembleParseError(f"'{raw}' is not a decimal number", row, column)
    if not np.isfinite(value):
        raise EnsembleParseError(f"'{raw}' is not finite", row, column)
    return value


def _parse_step(raw: str, row: int) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise EnsembleParseError(f"'{raw}' is not an integer step", row, "step")


def load_ensemble(
    file: str | os.PathLike,
    name: Optional[str] = None,
    n_total: int = 0,
    unit_dispatch_cost: float = 0.0,
    rho: float = 0.1,
) -> DerClass:
    """
    Read an ensemble CSV (`control_id,condition,step,mean_kw,variance_kw2`).

    Row numbers in errors are file line numbers, the header being row 1.
    """
    path = Path(file)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EnsembleParseError(f"{path} is empty, expected a header", row=1)
    except pd.errors.ParserError as e:
        raise EnsembleParseError(f"{path} is not valid CSV: {e}")
    if list(frame.columns) != ENSEMBLE_COLUMNS:
        raise EnsembleParseError(
            f"expected header {','.join(ENSEMBLE_COLUMNS)}, got {','.join(frame.columns)}",
            row=1,
        )
    if frame.empty:
        raise ConstraintError(f"ensemble {path} has no load-shape pairs")

    rows: dict[str, list[tuple[int, float, float]]] = {}
    conditions: dict[str, str] = {}
    first_rows: dict[str, int] = {}
    for idx, record in enumerate(frame.itertuples(index=False), start=2):
        control = record.control_id
        if not control:
            raise EnsembleParseError("empty control id", idx, "control_id")
        step = _parse_step(record.step, idx)
        mean = _parse_float(record.mean_kw, idx, "mean_kw")
        variance = _parse_float(record.variance_kw2, idx, "variance_kw2")
        if variance < 0:
            raise ConstraintError(
                f"negative variance {variance} for '{control}' step {step} (row {idx})"
            )
        if conditions.setdefault(control, record.condition) != record.condition:
            raise EnsembleParseError(
                f"sequence '{control}' changes condition", idx, "condition"
            )
        first_rows.setdefault(control, idx)
        rows.setdefault(control, []).append((step, mean, variance))

    lengths = {control: len(entries) for control, entries in rows.items()}
    expected = next(iter(lengths.values()))
    for control, length in lengths.items():
        if length != expected:
            raise EnsembleParseError(
                f"{path}: sequence '{control}' has {length} steps, expected {expected}",
                first_rows[control],
                "step",
            )

    pairs = []
    for control, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        steps = [e[0] for e in entries]
        if steps != list(range(len(steps))):
            raise EnsembleParseError(
                f"steps of '{control}' are not contiguous from 0", column="step"
            )
        try:
            condition = ConditionKey.from_label(conditions[control])
        except ValueError as e:
            raise EnsembleParseError(str(e), column="condition")
        pairs.append(
            LoadShapePair(
                control=control,
                condition=condition,
                mean=[e[1] for e in entries],
                variance=[e[2] for e in entries],
            )
        )
    logger.info(f"Loaded {len(pairs)} load-shape pairs from {path}")
    return DerClass(
        name=name or path.stem,
        n_total=n_total,
        unit_dispatch_cost=unit_dispatch_cost,
        rho=rho,
        pairs=tuple(pairs),
    )


def ensemble_frame(der: DerClass) -> pd.DataFrame:
    records = []
    for pair in der.pairs:
        for k in range(pair.steps):
            records.append(
                (
                    pair.control,
                    pair.condition.label,
                    k,
                    float(pair.mean[k]),
                    float(pair.variance[k]),
                )
            )
    return pd.DataFrame.from_records(records, columns=ENSEMBLE_COLUMNS)


def save_ensemble(der: DerClass, file: str | os.PathLike) -> Path:
    """Write `der` in the ensemble CSV schema; inverse of `load_ensemble`."""
    return write_csv(file, ensemble_frame(der))
