"""
Mean-variance dispatch of device counts across hull vertices.

For one step k and one direction (`bound`), the allocation n minimises

    L n + n' diag(Q) n  =  bound * mean(k) + lam * variance(k)

subject to per-type group sums (equality, or at most n_total once an
architecture is applied), optional dispatch-budget rows and n >= 0.
"""

import logging
from enum import StrEnum
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from ensemble import DerClass, LoadShapePair, frozen_array
from errors import ConstraintError, DimensionError, NonConvexProblemError
from qp_solver import ActiveSetSolver, KktResiduals, SolverOptions, kkt_residuals

logger = logging.getLogger(__name__)

BETA_TOL = 1e-9
BINDING_TOL = 1e-6


class GroupMode(StrEnum):
    EQUALITY = "equality"
    INEQUALITY = "inequality"


class Architecture(StrEnum):
    LAYERED = "layered"
    CENTRALIZED = "centralized"


class ObjectiveParams(BaseModel):
    model_config = {"frozen": True}

    bound: Literal[-1, 1]
    lam: float = Field(0.1, ge=0, description="variance weight")
    time_index: int = Field(0, ge=0)
    confidence_z: float = Field(1.645, ge=0)


class QpProblem(BaseModel):
    """Dispatch QP for one step; variables are concatenated per DER type."""

    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    linear: np.ndarray
    quadratic_diag: np.ndarray
    group_of: np.ndarray
    group_names: Tuple[str, ...]
    group_rhs: np.ndarray
    group_costs: np.ndarray
    group_mode: GroupMode = GroupMode.EQUALITY
    budget_matrix: np.ndarray = Field(default_factory=lambda: frozen_array(np.zeros((0, 0)), 2))
    budget_rhs: np.ndarray = Field(default_factory=lambda: frozen_array([]))
    budget_names: Tuple[str, ...] = ()
    labels: Tuple[str, ...]
    billable: np.ndarray
    mean_k: np.ndarray
    sigma2_k: np.ndarray
    rho: np.ndarray
    bound: Literal[-1, 1] = -1
    lam: float = 0.0
    time_index: int = 0
    architecture: Optional[Architecture] = None

    @field_validator(
        "linear",
        "quadratic_diag",
        "group_rhs",
        "group_costs",
        "budget_rhs",
        "mean_k",
        "sigma2_k",
        "rho",
        mode="before",
    )
    @classmethod
    def _vector(cls, v):
        return frozen_array(v)

    @field_validator("budget_matrix", mode="before")
    @classmethod
    def _matrix(cls, v):
        return frozen_array(v, ndim=2)

    @field_validator("group_of", mode="before")
    @classmethod
    def _index(cls, v):
        arr = np.array(v, dtype=int)
        arr.setflags(write=False)
        return arr

    @field_validator("billable", mode="before")
    @classmethod
    def _mask(cls, v):
        arr = np.array(v, dtype=bool)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check_dimensions(self) -> "QpProblem":
        n = self.linear.size
        for name in ("quadratic_diag", "group_of", "billable", "mean_k", "sigma2_k", "rho"):
            if getattr(self, name).size != n:
                raise DimensionError(f"{name} has {getattr(self, name).size} entries, expected {n}")
        if len(self.labels) != n:
            raise DimensionError(f"{len(self.labels)} labels for {n} variables")
        m = len(self.group_names)
        if self.group_rhs.size != m or self.group_costs.size != m:
            raise DimensionError("group names, right-hand sides and costs differ in length")
        if n and (self.group_of.min() < 0 or self.group_of.max() >= m):
            raise DimensionError("variable assigned to an unknown group")
        if self.budget_rhs.size:
            if self.budget_matrix.shape != (self.budget_rhs.size, n):
                raise DimensionError(
                    f"budget matrix has shape {self.budget_matrix.shape}, "
                    f"expected ({self.budget_rhs.size}, {n})"
                )
        if len(self.budget_names) != self.budget_rhs.size:
            raise DimensionError("budget names and right-hand sides differ in length")
        return self

    @property
    def n_vars(self) -> int:
        return int(self.linear.size)

    def group_matrix(self) -> np.ndarray:
        G = np.zeros((len(self.group_names), self.n_vars))
        G[self.group_of, np.arange(self.n_vars)] = 1.0
        return G

    def objective_value(self, n) -> float:
        n = np.asarray(n, dtype=float)
        return float(self.linear @ n + self.quadratic_diag @ (n * n))

    def constraint_system(self):
        """
        Row blocks as (A_eq, b_eq, eq_names, A_in, b_in, in_names).

        Inequality rows are ordered: group rows (inequality mode only), budget
        rows, then one nonnegativity row per variable.
        """
        n = self.n_vars
        G = self.group_matrix()
        group_names = [f"group:{g}" for g in self.group_names]
        nonneg = -np.eye(n)
        nonneg_names = [f"nonneg:{label}" for label in self.labels]
        budget = self.budget_matrix if self.budget_rhs.size else np.zeros((0, n))
        if self.group_mode == GroupMode.EQUALITY:
            A_eq, b_eq, eq_names = G, self.group_rhs, group_names
            A_in = np.vstack([budget, nonneg])
            b_in = np.r_[self.budget_rhs, np.zeros(n)]
            in_names = list(self.budget_names) + nonneg_names
        else:
            A_eq, b_eq, eq_names = np.zeros((0, n)), np.zeros(0), []
            A_in = np.vstack([G, budget, nonneg])
            b_in = np.r_[self.group_rhs, self.budget_rhs, np.zeros(n)]
            in_names = group_names + list(self.budget_names) + nonneg_names
        return A_eq, b_eq, eq_names, A_in, b_in, in_names


class DispatchPlan(BaseModel):
    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    n: np.ndarray
    objective: float
    mean_kw: float
    variance_kw2: float
    active_constraints: Tuple[str, ...]
    kkt: KktResiduals
    iterations: int
    multipliers_eq: np.ndarray
    multipliers_in: np.ndarray


def _step_values(vertices: Sequence[LoadShapePair], k: int) -> Tuple[np.ndarray, np.ndarray]:
    if not vertices:
        raise ConstraintError("empty vertex set")
    steps = vertices[0].steps
    if not 0 <= k < steps:
        raise DimensionError(f"time index {k} outside period of {steps} steps")
    return (
        np.array([v.mean[k] for v in vertices]),
        np.array([v.variance[k] for v in vertices]),
    )


def aggregate_mean(n, vertices: Sequence[LoadShapePair], k: int) -> float:
    n = np.asarray(n, dtype=float)
    if n.size != len(vertices):
        raise DimensionError(f"{n.size} counts for {len(vertices)} vertices")
    if n.size == 0:
        return 0.0
    mean, _ = _step_values(vertices, k)
    return float(n @ mean)


def partition_variance(n_j, rho, sigma2_k):
    """Variance of the summed response of n_j equally correlated devices."""
    return (n_j * n_j * rho + n_j * (1.0 - rho)) * sigma2_k


def total_variance(n, vertices: Sequence[LoadShapePair], rho: float, k: int) -> float:
    n = np.asarray(n, dtype=float)
    if n.size != len(vertices):
        raise DimensionError(f"{n.size} counts for {len(vertices)} vertices")
    if n.size == 0:
        return 0.0
    _, sigma2 = _step_values(vertices, k)
    return float(np.sum(partition_variance(n, rho, sigma2)))


def build_objective(
    vertices: Sequence[LoadShapePair], params: ObjectiveParams, rho: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Linear row L and diagonal Q of the mean-variance objective at step k."""
    mean, sigma2 = _step_values(vertices, params.time_index)
    linear = params.bound * mean + params.lam * (1.0 - rho) * sigma2
    quadratic = params.lam * rho * sigma2
    return linear, quadratic


def build_multi_type_qp(
    classes: Sequence[DerClass],
    vertices: Sequence[Sequence[LoadShapePair]],
    params: ObjectiveParams,
    rho: Optional[float] = None,
) -> QpProblem:
    """
    Block problem over several DER types. `rho` overrides the per-class
    correlation when given.
    """
    if not classes:
        raise ConstraintError("at least one DER class is required")
    if len(classes) != len(vertices):
        raise DimensionError(f"{len(vertices)} vertex sets for {len(classes)} classes")
    linear, quadratic, group_of, labels, billable = [], [], [], [], []
    mean_k, sigma2_k, rhos = [], [], []
    for r, (der, verts) in enumerate(zip(classes, vertices)):
        class_rho = der.rho if rho is None else rho
        L, Q = build_objective(verts, params, class_rho)
        m, s = _step_values(verts, params.time_index)
        linear.append(L)
        quadratic.append(Q)
        mean_k.append(m)
        sigma2_k.append(s)
        rhos.append(np.full(len(verts), class_rho))
        group_of.extend([r] * len(verts))
        labels.extend(f"{der.name}:{v.control}" for v in verts)
        billable.extend(not v.is_null for v in verts)
    return QpProblem(
        linear=np.concatenate(linear),
        quadratic_diag=np.concatenate(quadratic),
        group_of=group_of,
        group_names=tuple(der.name for der in classes),
        group_rhs=[der.n_total for der in classes],
        group_costs=[der.unit_dispatch_cost for der in classes],
        labels=tuple(labels),
        billable=billable,
        mean_k=np.concatenate(mean_k),
        sigma2_k=np.concatenate(sigma2_k),
        rho=np.concatenate(rhos),
        bound=params.bound,
        lam=params.lam,
        time_index=params.time_index,
    )


def build_single_type_qp(
    der: DerClass,
    vertices: Sequence[LoadShapePair],
    params: ObjectiveParams,
    rho: Optional[float] = None,
) -> QpProblem:
    return build_multi_type_qp([der], [vertices], params, rho=rho)


def default_beta(classes_or_problem) -> np.ndarray:
    """Budget shares proportional to n_total * unit cost (uniform when all are zero)."""
    if isinstance(classes_or_problem, QpProblem):
        weight = classes_or_problem.group_rhs * classes_or_problem.group_costs
    else:
        weight = np.array(
            [der.n_total * der.unit_dispatch_cost for der in classes_or_problem], dtype=float
        )
    if weight.size == 0:
        raise ConstraintError("at least one DER type is required")
    total = weight.sum()
    if total <= 0:
        return np.full(weight.size, 1.0 / weight.size)
    return weight / total


def check_beta(beta, n_groups: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or beta.size != n_groups:
        raise ConstraintError(f"beta has {beta.size} shares for {n_groups} DER types")
    if np.any(beta < 0) or abs(beta.sum() - 1.0) > BETA_TOL:
        raise ConstraintError(
            f"beta shares must be nonnegative and sum to 1, got sum {beta.sum()!r}"
        )
    return beta


def apply_architecture(
    problem: QpProblem,
    arch: Architecture | str,
    budget: float,
    beta=None,
    costs=None,
) -> QpProblem:
    """
    Relax group sums to at most n_total and add the architecture's budget rows.

    Layered: one row per type, limited to beta[r] * budget. Centralized: one
    shared row limited to budget. Only devices on non-null sequences are billed.
    An infinite budget adds no rows.
    """
    arch = Architecture(arch)
    if not budget >= 0:
        raise ConstraintError(f"budget must be nonnegative, got {budget}")
    n_groups = len(problem.group_names)
    costs = problem.group_costs if costs is None else np.asarray(costs, dtype=float)
    if costs.size != n_groups:
        raise DimensionError(f"{costs.size} unit costs for {n_groups} DER types")
    if np.any(costs < 0):
        raise ConstraintError("unit dispatch costs must be nonnegative")
    if arch == Architecture.LAYERED:
        beta = check_beta(default_beta(problem) if beta is None else beta, n_groups)

    per_var_cost = costs[problem.group_of] * problem.billable
    if np.isinf(budget):
        rows, rhs, names = np.zeros((0, problem.n_vars)), np.zeros(0), ()
    elif arch == Architecture.LAYERED:
        rows = np.zeros((n_groups, problem.n_vars))
        rows[problem.group_of, np.arange(problem.n_vars)] = per_var_cost
        rhs = beta * budget
        names = tuple(f"budget:{g}" for g in problem.group_names)
    else:
        rows = per_var_cost[None, :]
        rhs = np.array([budget], dtype=float)
        names = ("budget",)

    return problem.model_copy(
        update={
            "group_mode": GroupMode.INEQUALITY,
            "group_costs": frozen_array(costs),
            "budget_matrix": frozen_array(rows, ndim=2),
            "budget_rhs": frozen_array(rhs),
            "budget_names": names,
            "architecture": arch,
        }
    )


def _binding(problem: QpProblem, n: np.ndarray) -> List[str]:
    names = []
    group_sums = problem.group_matrix() @ n
    for g, total, rhs in zip(problem.group_names, group_sums, problem.group_rhs):
        if problem.group_mode == GroupMode.EQUALITY or rhs - total <= BINDING_TOL * (1 + rhs):
            names.append(f"group:{g}")
    if problem.budget_rhs.size:
        spend = problem.budget_matrix @ n
        for name, s, rhs in zip(problem.budget_names, spend, problem.budget_rhs):
            if rhs - s <= BINDING_TOL * (1 + rhs):
                names.append(name)
    return names


def solve_qp(
    problem: QpProblem, tol: float = 1e-8, options: Optional[SolverOptions] = None
) -> DispatchPlan:
    if np.any(problem.quadratic_diag < 0):
        bad = [problem.labels[i] for i in np.flatnonzero(problem.quadratic_diag < 0)]
        raise NonConvexProblemError(f"negative quadratic coefficient for {', '.join(bad)}")
    options = options or SolverOptions(tol=tol)
    A_eq, b_eq, eq_names, A_in, b_in, in_names = problem.constraint_system()
    x0 = np.zeros(problem.n_vars) if problem.group_mode == GroupMode.INEQUALITY else None
    solution = ActiveSetSolver(options).solve(
        2.0 * np.diag(problem.quadratic_diag),
        problem.linear,
        A_eq,
        b_eq,
        A_in,
        b_in,
        eq_names=eq_names,
        in_names=in_names,
        x0=x0,
    )
    n = np.maximum(np.asarray(solution.x), 0.0)
    active = _binding(problem, n)
    if problem.budget_rhs.size and any(a.startswith("budget") for a in active):
        logger.debug(
            f"k={problem.time_index} bound={problem.bound}: binding {', '.join(active)}"
        )
    return DispatchPlan(
        n=frozen_array(n),
        objective=problem.objective_value(n),
        mean_kw=float(n @ problem.mean_k),
        variance_kw2=float(np.sum(partition_variance(n, problem.rho, problem.sigma2_k))),
        active_constraints=tuple(active),
        kkt=solution.kkt,
        iterations=solution.iterations,
        multipliers_eq=solution.multipliers_eq,
        multipliers_in=solution.multipliers_in,
    )


def kkt_certificate(problem: QpProblem, plan: DispatchPlan) -> KktResiduals:
    """Recompute the optimality residuals of `plan` from the problem data."""
    A_eq, b_eq, _, A_in, b_in, _ = problem.constraint_system()
    return kkt_residuals(
        2.0 * np.diag(problem.quadratic_diag),
        problem.linear,
        A_eq,
        b_eq,
        A_in,
        b_in,
        np.asarray(plan.n),
        np.asarray(plan.multipliers_eq),
        np.asarray(plan.multipliers_in),
    )


def group_spend(problem: QpProblem, n) -> np.ndarray:
    """Per-type dispatch cost of allocation `n`."""
    n = np.asarray(n, dtype=float)
    per_var = problem.group_costs[problem.group_of] * problem.billable * n
    return np.bincount(problem.group_of, weights=per_var, minlength=len(problem.group_names))


def beta_from_plan(problem: QpProblem, plan: DispatchPlan) -> np.ndarray:
    """Budget shares actually spent by `plan`; uniform when nothing is spent."""
    spend = group_spend(problem, plan.n)
    total = spend.sum()
    if total <= 0:
        return np.full(spend.size, 1.0 / spend.size)
    return spend / total


class RoundedAllocation(BaseModel):
    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    counts: np.ndarray
    objective: float
    violated: Tuple[str, ...]


def round_counts(plan: DispatchPlan, problem: QpProblem) -> RoundedAllocation:
    """Whole device counts (round half to even), re-checked against every row."""
    counts = np.round(np.asarray(plan.n)).astype(int)
    n = counts.astype(float)
    violated = []
    sums = problem.group_matrix() @ n
    for g, total, rhs in zip(problem.group_names, sums, problem.group_rhs):
        if problem.group_mode == GroupMode.EQUALITY and total != rhs:
            violated.append(f"group:{g}")
        elif problem.group_mode == GroupMode.INEQUALITY and total > rhs:
            violated.append(f"group:{g}")
    if problem.budget_rhs.size:
        spent = problem.budget_matrix @ n
        for name, s, rhs in zip(problem.budget_names, spent, problem.budget_rhs):
            if s > rhs + 1e-9 * (1 + rhs):
                violated.append(name)
    if violated:
        logger.info(f"Rounded allocation violates {', '.join(violated)}")
    counts.setflags(write=False)
    return RoundedAllocation(
        counts=counts, objective=problem.objective_value(n), violated=tuple(violated)
    )
