"""
Day-ahead power tracking with an adaptive partition response model.

Each day the fleet is split into convex partition weights fitted to a reference
against the current model Y_hat, partition-level responses are measured with
noise against the true response, and both the measurements and the weights are
passed through identical first-order (bilinear) low-pass filters whose ratio is
the new model estimate.
"""

import logging
from enum import StrEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from ensemble import DerClass, frozen_array
from errors import ConfigurationError, DimensionError
from qp_solver import ActiveSetSolver, KktResiduals, SolverOptions

logger = logging.getLogger(__name__)

MEASURED_WEIGHT = 1e-6
DEFAULT_COND_FLOOR = 1e-3
TRACKING_COLUMNS = ["day", "tracking_rmse_kw", "model_error_rel", "min_lam_filt", "disturbed"]


class ResponseMatrix(BaseModel):
    """Aggregate daily power shape of each partition, one row per partition (kW)."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    Y: np.ndarray
    labels: Tuple[str, ...] = ()

    @field_validator("Y", mode="before")
    @classmethod
    def _matrix(cls, v):
        return frozen_array(v, ndim=2)

    @model_validator(mode="after")
    def _check(self) -> "ResponseMatrix":
        if self.Y.shape[0] < 1 or self.Y.shape[1] < 1:
            raise ValueError("response matrix needs at least one partition and one step")
        if self.labels and len(self.labels) != self.Y.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.Y.shape[0]} partitions")
        return self

    @property
    def partitions(self) -> int:
        return int(self.Y.shape[0])

    @property
    def steps(self) -> int:
        return int(self.Y.shape[1])


def as_response_matrix(Y) -> ResponseMatrix:
    return Y if isinstance(Y, ResponseMatrix) else ResponseMatrix(Y=Y)


class PartitionWeights(BaseModel):
    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    lambdas: np.ndarray
    simplex: bool = True
    rank_deficient: bool = False
    residual_kw: float = 0.0
    kkt: Optional[KktResiduals] = None

    @field_validator("lambdas", mode="before")
    @classmethod
    def _vector(cls, v):
        return frozen_array(v)

    @model_validator(mode="after")
    def _check_simplex(self) -> "PartitionWeights":
        if self.simplex:
            if np.any(self.lambdas < 0) or self.lambdas.sum() > 1 + 1e-9:
                raise ValueError("simplex weights must be nonnegative and sum to at most 1")
        return self

    @property
    def measured(self) -> np.ndarray:
        """Partitions that receive a dispatch and therefore produce a measurement."""
        return self.lambdas > MEASURED_WEIGHT


class MeasurementModel(BaseModel):
    model_config = {"frozen": True}

    epsilon_rel: float = Field(0.02, ge=0)
    seed: int = 0


class TrackingState(BaseModel):
    """Filter memory plus the current model estimate; transitions return new states."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    z_filt: np.ndarray
    lam_filt: np.ndarray
    z_prev: np.ndarray
    lam_prev: np.ndarray
    y_hat: np.ndarray
    tau_adapt: float = Field(7.0, gt=0)
    t_s: float = 1.0
    day_index: int = 0

    @field_validator("z_filt", "z_prev", "y_hat", mode="before")
    @classmethod
    def _matrix(cls, v):
        return frozen_array(v, ndim=2)

    @field_validator("lam_filt", "lam_prev", mode="before")
    @classmethod
    def _vector(cls, v):
        return frozen_array(v)

    @field_validator("t_s")
    @classmethod
    def _daily(cls, v):
        if v != 1.0:
            raise ValueError("the sampling period is one day")
        return v

    @model_validator(mode="after")
    def _check_shapes(self) -> "TrackingState":
        shape = self.y_hat.shape
        if self.z_filt.shape != shape or self.z_prev.shape != shape:
            raise DimensionError(f"filtered measurements must have shape {shape}")
        if self.lam_filt.size != shape[0] or self.lam_prev.size != shape[0]:
            raise DimensionError(f"filtered weights must have {shape[0]} entries")
        return self

    def step(self, z_new, lam_new) -> "TrackingState":
        return filter_step(self, z_new, lam_new)


def filter_coefficients(tau: float, t_s: float = 1.0) -> Tuple[float, float]:
    """(a, b) of y[i] = a*y[i-1] + b*(u[i] + u[i-1]), bilinear first-order low pass."""
    if tau <= 0 or t_s <= 0:
        raise ValueError("time constant and sampling period must be positive")
    ratio = 2.0 * tau / t_s
    return (ratio - 1.0) / (ratio + 1.0), 1.0 / (ratio + 1.0)


def initial_state(Y, tau: float, t_s: float = 1.0) -> TrackingState:
    """Empty filters and the day-ahead model as the initial estimate."""
    Y = as_response_matrix(Y).Y
    zeros = np.zeros_like(Y)
    return TrackingState(
        z_filt=zeros,
        lam_filt=np.zeros(Y.shape[0]),
        z_prev=zeros,
        lam_prev=np.zeros(Y.shape[0]),
        y_hat=Y,
        tau_adapt=tau,
        t_s=t_s,
    )


def filter_step(state: TrackingState, z_new, lam_new) -> TrackingState:
    """Advance both filters by one day with the same coefficients."""
    z_new = np.asarray(z_new, dtype=float)
    lam_new = np.asarray(lam_new, dtype=float)
    if z_new.shape != state.z_filt.shape or lam_new.shape != state.lam_filt.shape:
        raise DimensionError(
            f"measurement {z_new.shape} / weights {lam_new.shape} do not match "
            f"state {state.z_filt.shape}"
        )
    a, b = filter_coefficients(state.tau_adapt, state.t_s)
    return state.model_copy(
        update={
            "z_filt": frozen_array(a * state.z_filt + b * (z_new + state.z_prev), ndim=2),
            "lam_filt": frozen_array(a * state.lam_filt + b * (lam_new + state.lam_prev)),
            "z_prev": frozen_array(z_new, ndim=2),
            "lam_prev": frozen_array(lam_new),
            "day_index": state.day_index + 1,
        }
    )


def estimate_actual(
    state: TrackingState, cond_floor: float = DEFAULT_COND_FLOOR
) -> ResponseMatrix:
    """
    Ratio of filtered measurements to filtered weights, row by row.

    Rows whose filtered weight is below `cond_floor` keep the previous estimate.
    """
    y_hat = np.array(state.y_hat)
    lam = np.asarray(state.lam_filt)
    usable = lam >= cond_floor
    y_hat[usable] = state.z_filt[usable] / lam[usable, None]
    skipped = np.flatnonzero(~usable)
    if skipped.size:
        logger.debug(
            f"Day {state.day_index}: partitions {skipped.tolist()} below conditioning "
            f"floor {cond_floor:g}, estimate kept"
        )
    return ResponseMatrix(Y=y_hat)


def fit_partition(
    Y, y_ref, simplex: bool = True, tol: float = 1e-8
) -> PartitionWeights:
    """
    Least-squares partition weights reproducing `y_ref` from the rows of `Y`.

    In simplex mode the weights are nonnegative and sum to at most one; otherwise
    the minimum-norm least-squares solution is returned and rank deficiency is
    flagged.
    """
    Y = as_response_matrix(Y).Y
    y_ref = np.asarray(y_ref, dtype=float).ravel()
    if y_ref.size != Y.shape[1]:
        raise DimensionError(f"reference has {y_ref.size} steps, model has {Y.shape[1]}")
    q = Y.shape[0]
    if not simplex:
        lambdas, _, rank, _ = np.linalg.lstsq(Y.T, y_ref, rcond=None)
        deficient = bool(rank < q)
        if deficient:
            logger.info(f"Response matrix has rank {rank} < {q}, minimum-norm weights used")
        return PartitionWeights(
            lambdas=lambdas,
            simplex=False,
            rank_deficient=deficient,
            residual_kw=float(np.linalg.norm(lambdas @ Y - y_ref)),
        )

    A_in = np.vstack([-np.eye(q), np.ones((1, q))])
    b_in = np.r_[np.zeros(q), 1.0]
    solution = ActiveSetSolver(SolverOptions(tol=tol)).solve(
        2.0 * Y @ Y.T,
        -2.0 * Y @ y_ref,
        A_in=A_in,
        b_in=b_in,
        in_names=[f"nonneg:{i}" for i in range(q)] + ["sum<=1"],
        x0=np.zeros(q),
    )
    lambdas = np.maximum(np.asarray(solution.x), 0.0)
    if lambdas.sum() > 1.0:
        lambdas = lambdas / lambdas.sum()
    return PartitionWeights(
        lambdas=lambdas,
        simplex=True,
        rank_deficient=bool(np.linalg.matrix_rank(Y) < q),
        residual_kw=float(np.linalg.norm(lambdas @ Y - y_ref)),
        kkt=solution.kkt,
    )


def simulate_measurement(
    Y_actual, weights: PartitionWeights, model: MeasurementModel, day: int
) -> np.ndarray:
    """
    Partition-level measurement diag(lambda) Y_actual + eps for dispatched
    partitions; rows of partitions without dispatch are zero.

    The noise draw depends only on (seed, day).
    """
    Y = as_response_matrix(Y_actual).Y
    lam = np.asarray(weights.lambdas)
    if lam.size != Y.shape[0]:
        raise DimensionError(f"{lam.size} weights for {Y.shape[0]} partitions")
    rng = np.random.default_rng([model.seed, day])
    noise = rng.standard_normal(Y.shape)
    rms = np.sqrt(np.mean(Y * Y, axis=1))
    z = lam[:, None] * Y + model.epsilon_rel * rms[:, None] * noise
    z[~weights.measured] = 0.0
    return z


def rotating_reference(
    Y,
    days: int,
    scale: float = 0.9,
    excitation: float = 0.4,
    perturbation: float = 0.05,
    seed: int = 0,
) -> np.ndarray:
    """
    One reference per day inside the achievable set: a scaled convex mix of the
    rows that emphasises partition (day mod Q), plus a small random perturbation.
    """
    Y = as_response_matrix(Y).Y
    if not 0 < scale <= 1 or not 0 <= excitation <= 1:
        raise ConfigurationError("reference scale must be in (0, 1], excitation in [0, 1]")
    q = Y.shape[0]
    rng = np.random.default_rng(seed)
    refs = np.empty((days, Y.shape[1]))
    for i in range(days):
        w = np.full(q, (1.0 - excitation) / q)
        w[i % q] += excitation
        y = (scale * w) @ Y
        rms = np.sqrt(np.mean(y * y))
        refs[i] = y + perturbation * rms * rng.standard_normal(Y.shape[1])
    return refs


def response_matrix_from_classes(
    classes: Sequence[DerClass], max_partitions: int = 3
) -> ResponseMatrix:
    """
    Partition shapes n_total * vertex mean from reduced classes, keeping the
    `max_partitions` non-null shapes with the most energy (ties keep class order).
    """
    rows, labels = [], []
    for der in classes:
        for pair in der.pairs:
            if pair.is_null:
                continue
            rows.append(der.n_total * np.asarray(pair.mean))
            labels.append(f"{der.name}:{pair.control}")
    if not rows:
        raise ConfigurationError("fleet has no dispatchable sequences to track with")
    energy = np.array([np.linalg.norm(r) for r in rows])
    order = sorted(np.argsort(-energy, kind="stable")[:max_partitions])
    return ResponseMatrix(
        Y=np.vstack([rows[i] for i in order]), labels=tuple(labels[i] for i in order)
    )


class DisturbanceKind(StrEnum):
    REPLACE = "replace"
    PERMUTE = "permute"


class Disturbance(BaseModel):
    """Change of true partition behaviour from `day` on."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    day: int = Field(..., ge=0)
    kind: DisturbanceKind = DisturbanceKind.PERMUTE
    new_Y: Optional[np.ndarray] = None

    @field_validator("new_Y", mode="before")
    @classmethod
    def _matrix(cls, v):
        return None if v is None else frozen_array(v, ndim=2)

    @model_validator(mode="after")
    def _check(self) -> "Disturbance":
        if self.kind == DisturbanceKind.REPLACE and self.new_Y is None:
            raise ValueError("a replacing disturbance needs new_Y")
        return self

    def apply(self, Y: np.ndarray) -> np.ndarray:
        if self.kind == DisturbanceKind.PERMUTE:
            return np.roll(Y, 1, axis=0)
        if self.new_Y.shape != Y.shape:
            raise DimensionError(f"new_Y has shape {self.new_Y.shape}, expected {Y.shape}")
        return np.asarray(self.new_Y)


class DayRecord(BaseModel):
    model_config = {"frozen": True}

    day: int
    tracking_rmse_kw: float
    model_error_rel: float
    min_lam_filt: float
    disturbed: bool


def relative_model_error(y_hat, Y_true) -> float:
    """Frobenius model error relative to the true response; infinite against an all-zero truth."""
    error = float(np.linalg.norm(np.asarray(y_hat) - np.asarray(Y_true)))
    scale = float(np.linalg.norm(Y_true))
    if scale == 0.0:
        return 0.0 if error == 0.0 else float("inf")
    return error / scale


class AdaptationLog(BaseModel):
    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    records: Tuple[DayRecord, ...]
    final_state: TrackingState
    metadata: dict

    def series(self, field: str) -> np.ndarray:
        return np.array([getattr(r, field) for r in self.records])


def run_adaptation(
    initial_Y,
    references,
    days: int,
    tau: float = 7.0,
    disturbance: Optional[Disturbance] = None,
    model: Optional[MeasurementModel] = None,
    simplex: bool = True,
    cond_floor: float = DEFAULT_COND_FLOOR,
    Y_true=None,
) -> AdaptationLog:
    """
    Closed daily loop: fit weights against the model, measure against the true
    response (switched by `disturbance`), filter, re-estimate the model.

    `Y_true` defaults to `initial_Y`, i.e. a model that starts out correct.
    """
    model = model or MeasurementModel()
    Y_model = as_response_matrix(initial_Y).Y
    Y_base = Y_model if Y_true is None else as_response_matrix(Y_true).Y
    if Y_base.shape != Y_model.shape:
        raise DimensionError(f"true response {Y_base.shape} differs from model {Y_model.shape}")
    refs = np.atleast_2d(np.asarray(references, dtype=float))
    if refs.shape != (days, Y_model.shape[1]):
        raise DimensionError(
            f"expected {days} references of {Y_model.shape[1]} steps, got {refs.shape}"
        )
    if disturbance is not None and disturbance.day >= days:
        raise ConfigurationError(
            f"disturbance day {disturbance.day} is outside the {days}-day horizon"
        )
    Y_after = disturbance.apply(Y_base) if disturbance is not None else Y_base

    state = initial_state(Y_model, tau)
    records: List[DayRecord] = []
    rank_deficient_days = 0
    for day in range(days):
        disturbed = disturbance is not None and day >= disturbance.day
        Y_now = Y_after if disturbed else Y_base
        weights = fit_partition(state.y_hat, refs[day], simplex=simplex)
        rank_deficient_days += weights.rank_deficient
        lam_measured = np.where(weights.measured, weights.lambdas, 0.0)
        z = simulate_measurement(Y_now, weights, model, day)
        state = state.step(z, lam_measured)
        y_hat = estimate_actual(state, cond_floor).Y
        state = state.model_copy(update={"y_hat": y_hat})

        delivered = np.asarray(weights.lambdas) @ Y_now
        records.append(
            DayRecord(
                day=day,
                tracking_rmse_kw=float(np.sqrt(np.mean((delivered - refs[day]) ** 2))),
                model_error_rel=relative_model_error(y_hat, Y_now),
                min_lam_filt=float(np.min(state.lam_filt)),
                disturbed=bool(disturbed),
            )
        )
    logger.info(
        f"Adaptation over {days} days (tau {tau:g}): final model error "
        f"{records[-1].model_error_rel:.3g}, tracking RMSE {records[-1].tracking_rmse_kw:.3g} kW"
        if records
        else "Adaptation run with an empty horizon"
    )
    return AdaptationLog(
        records=tuple(records),
        final_state=state,
        metadata={
            "tau_adapt": tau,
            "t_s": 1.0,
            "epsilon_rel": model.epsilon_rel,
            "seed": model.seed,
            "simplex": simplex,
            "cond_floor": cond_floor,
            "partitions": Y_model.shape[0],
            "disturbance_day": None if disturbance is None else disturbance.day,
            "disturbance_kind": None if disturbance is None else disturbance.kind.value,
            "rank_deficient_days": rank_deficient_days,
        },
    )


def tracking_frame(log: AdaptationLog) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [r.model_dump() for r in log.records], columns=TRACKING_COLUMNS
    )


def tracking_plot_data(log: AdaptationLog) -> dict:
    return {
        "days": log.series("day").tolist(),
        "series": {
            "tracking_rmse_kw": log.series("tracking_rmse_kw").tolist(),
            "model_error_rel": log.series("model_error_rel").tolist(),
        },
        "metadata": log.metadata,
    }
