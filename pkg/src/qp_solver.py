"""
Primal active-set solver for convex quadratic programs

    min  1/2 x'Hx + c'x
    s.t. A_eq x  = b_eq
         A_in x <= b_in

with H symmetric positive semidefinite. Steps are computed in the null space of
the working-set rows, so a singular H (linear programs included) is handled
without regularisation. The start point comes from an elastic phase-one linear
program, which also produces the infeasibility report.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.linalg import null_space
from scipy.optimize import linprog

from ensemble import frozen_array
from errors import DimensionError, InfeasibleProblemError, SolverError

logger = logging.getLogger(__name__)


class SolverOptions(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    tol: float = Field(1e-8, gt=0, description="KKT certificate tolerance")
    feas_tol: float = Field(1e-6, gt=0, description="infeasibility threshold")
    max_iter: int = Field(0, ge=0, description="0 picks 100 + 10 * (n + rows)")
    check_kkt: bool = True


class KktResiduals(BaseModel):
    """Scaled residuals of the four first-order optimality conditions."""

    model_config = {"frozen": True}

    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def satisfied(self, tol: float) -> bool:
        return self.worst <= tol


class QpSolution(BaseModel):
    model_config = {"frozen": True, "arbitrary_types_allowed": True}

    x: np.ndarray
    objective: float
    multipliers_eq: np.ndarray
    multipliers_in: np.ndarray
    active_in: Tuple[int, ...]
    iterations: int
    kkt: KktResiduals


def _matrix(A, n: int) -> np.ndarray:
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, n))
    if A.shape[1] != n:
        raise DimensionError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
    return A


def _vector(b, m: int) -> np.ndarray:
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    if b.size != m:
        raise DimensionError(f"right-hand side has {b.size} entries, expected {m}")
    return b


def kkt_residuals(
    H: np.ndarray,
    c: np.ndarray,
    A_eq: np.ndarray,
    b_eq: np.ndarray,
    A_in: np.ndarray,
    b_in: np.ndarray,
    x: np.ndarray,
    mu_eq: np.ndarray,
    mu_in: np.ndarray,
) -> KktResiduals:
    """
    Residuals scaled by the magnitude of the terms they balance, so one
    tolerance applies to fleets of 1 device and of 10,000 devices alike.
    """
    Hx = H @ x
    grad = Hx + c + A_eq.T @ mu_eq + A_in.T @ mu_in
    stat_scale = 1.0 + max(
        np.abs(Hx).max(initial=0.0),
        np.abs(c).max(initial=0.0),
        np.abs(A_eq.T @ mu_eq).max(initial=0.0),
        np.abs(A_in.T @ mu_in).max(initial=0.0),
    )
    eq_res = A_eq @ x - b_eq
    in_res = A_in @ x - b_in
    primal_scale = 1.0 + max(
        np.abs(b_eq).max(initial=0.0),
        np.abs(b_in).max(initial=0.0),
        np.abs(x).max(initial=0.0),
    )
    primal = max(np.abs(eq_res).max(initial=0.0), np.maximum(in_res, 0).max(initial=0.0))
    dual_scale = 1.0 + np.abs(mu_in).max(initial=0.0) + np.abs(mu_eq).max(initial=0.0)
    dual = np.maximum(-mu_in, 0).max(initial=0.0)
    comp = np.abs(mu_in * in_res).max(initial=0.0)
    return KktResiduals(
        stationarity=float(np.abs(grad).max(initial=0.0) / stat_scale),
        primal=float(primal / primal_scale),
        dual=float(dual / dual_scale),
        complementarity=float(comp / (dual_scale * primal_scale)),
    )


class ActiveSetSolver:
    def __init__(self, options: Optional[SolverOptions] = None):
        self.options = options or SolverOptions()

    def phase_one(
        self,
        A_eq: np.ndarray,
        b_eq: np.ndarray,
        A_in: np.ndarray,
        b_in: np.ndarray,
        eq_names: Sequence[str],
        in_names: Sequence[str],
    ) -> np.ndarray:
        """Feasible point from the elastic program min sum(slack)."""
        n = A_eq.shape[1]
        m_e, m_i = A_eq.shape[0], A_in.shape[0]
        if m_e + m_i == 0:
            return np.zeros(n)

        n_slack = 2 * m_e + m_i
        cost = np.r_[np.zeros(n), np.ones(n_slack)]
        lp_eq = lp_beq = lp_in = lp_bin = None
        if m_e:
            lp_eq = np.hstack(
                [A_eq, np.eye(m_e), -np.eye(m_e), np.zeros((m_e, m_i))]
            )
            lp_beq = b_eq
        if m_i:
            lp_in = np.hstack([A_in, np.zeros((m_i, 2 * m_e)), -np.eye(m_i)])
            lp_bin = b_in
        bounds = [(None, None)] * n + [(0, None)] * n_slack
        res = linprog(
            cost,
            A_ub=lp_in,
            b_ub=lp_bin,
            A_eq=lp_eq,
            b_eq=lp_beq,
            bounds=bounds,
            method="highs",
        )
        if res.status != 0:
            raise SolverError(f"phase-one program failed: {res.message}")

        slack = res.x[n:]
        violation = np.r_[slack[:m_e] + slack[m_e : 2 * m_e], slack[2 * m_e :]]
        names = list(eq_names) + list(in_names)
        violated = [names[i] for i in np.flatnonzero(violation > self.options.feas_tol)]
        if violated:
            raise InfeasibleProblemError(
                f"no allocation satisfies the constraints "
                f"(total violation {violation.sum():.3g})",
                violated,
            )
        return res.x[:n]

    @staticmethod
    def _independent(rows: np.ndarray, a: np.ndarray) -> bool:
        if rows.shape[0] == 0:
            return bool(np.linalg.norm(a) > 0)
        coef = np.linalg.lstsq(rows.T, a, rcond=None)[0]
        return bool(np.linalg.norm(rows.T @ coef - a) > 1e-10 * max(1.0, np.linalg.norm(a)))

    def solve(
        self,
        H,
        c,
        A_eq=None,
        b_eq=None,
        A_in=None,
        b_in=None,
        eq_names: Optional[Sequence[str]] = None,
        in_names: Optional[Sequence[str]] = None,
        x0=None,
    ) -> QpSolution:
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        H = np.asarray(H, dtype=float)
        if H.shape != (n, n):
            raise DimensionError(f"Hessian has shape {H.shape}, expected ({n}, {n})")
        A_eq = _matrix(A_eq, n)
        A_in = _matrix(A_in, n)
        b_eq = _vector(b_eq, A_eq.shape[0])
        b_in = _vector(b_in, A_in.shape[0])
        eq_names = list(eq_names or [f"eq{i}" for i in range(A_eq.shape[0])])
        in_names = list(in_names or [f"in{i}" for i in range(A_in.shape[0])])
        opts = self.options
        max_iter = opts.max_iter or 100 + 10 * (n + A_eq.shape[0] + A_in.shape[0])

        x = None
        if x0 is not None:
            x = np.asarray(x0, dtype=float).ravel()
            if (
                np.abs(A_eq @ x - b_eq).max(initial=0.0) > opts.feas_tol
                or (A_in @ x - b_in).max(initial=0.0) > opts.feas_tol
            ):
                logger.debug("Start point is infeasible, running phase one")
                x = None
        if x is None:
            x = self.phase_one(A_eq, b_eq, A_in, b_in, eq_names, in_names)

        # Working set: independent equality rows, then near-active inequalities
        rows = np.zeros((0, n))
        eq_work: List[int] = []
        for i in range(A_eq.shape[0]):
            if self._independent(rows, A_eq[i]):
                rows = np.vstack([rows, A_eq[i]])
                eq_work.append(i)
        in_work: List[int] = []
        slack = A_in @ x - b_in
        for i in range(A_in.shape[0]):
            if slack[i] >= -opts.feas_tol and self._independent(rows, A_in[i]):
                rows = np.vstack([rows, A_in[i]])
                in_work.append(i)

        def working_rows() -> Tuple[np.ndarray, np.ndarray]:
            A_w = np.vstack([A_eq[eq_work], A_in[in_work]])
            b_w = np.r_[b_eq[eq_work], b_in[in_work]]
            return A_w, b_w

        A_w, b_w = working_rows()
        if A_w.shape[0]:
            x = x + np.linalg.lstsq(A_w, b_w - A_w @ x, rcond=None)[0]

        scale = 1.0 + np.abs(c).max(initial=0.0) + np.abs(H).max(initial=0.0)
        drop_tol = 1e-11 * scale
        iterations = 0
        while True:
            if iterations >= max_iter:
                raise SolverError(f"active-set iteration limit {max_iter} reached")
            iterations += 1
            A_w, b_w = working_rows()
            g = H @ x + c
            Z = null_space(A_w) if A_w.shape[0] else np.eye(n)

            p, ray = self._step(H, g, Z)
            step_size = np.abs(p).max(initial=0.0)
            if step_size <= 1e-12 * (1.0 + np.abs(x).max(initial=0.0)):
                mu = (
                    np.linalg.lstsq(A_w.T, -g, rcond=None)[0]
                    if A_w.shape[0]
                    else np.zeros(0)
                )
                mu_in_w = mu[len(eq_work) :]
                if mu_in_w.size and mu_in_w.min() < -drop_tol:
                    # most negative multiplier, lowest row index on ties
                    k = min(range(len(in_work)), key=lambda j: (mu_in_w[j], in_work[j]))
                    logger.debug(f"Dropping {in_names[in_work[k]]} (multiplier {mu_in_w[k]:.3g})")
                    del in_work[k]
                    continue
                break

            alpha = np.inf if ray else 1.0
            blocking = None
            Ap = A_in @ p
            for i in range(A_in.shape[0]):
                if i in in_work or Ap[i] <= 1e-14 * np.abs(A_in[i]).max(initial=1.0) * step_size:
                    continue
                ratio = max(0.0, (b_in[i] - A_in[i] @ x) / Ap[i])
                if ratio < alpha:
                    alpha, blocking = ratio, i
            if not np.isfinite(alpha):
                raise SolverError("objective is unbounded below on the feasible region")
            x = x + alpha * p
            if blocking is not None:
                in_work.append(blocking)

        A_w, _ = working_rows()
        g = H @ x + c
        mu = np.linalg.lstsq(A_w.T, -g, rcond=None)[0] if A_w.shape[0] else np.zeros(0)
        mu_eq = np.zeros(A_eq.shape[0])
        mu_eq[eq_work] = mu[: len(eq_work)]
        mu_in = np.zeros(A_in.shape[0])
        mu_in[in_work] = mu[len(eq_work) :]

        kkt = kkt_residuals(H, c, A_eq, b_eq, A_in, b_in, x, mu_eq, mu_in)
        objective = float(0.5 * x @ H @ x + c @ x)
        logger.debug(
            f"Active-set solve: {iterations} iterations, objective {objective:.6g}, "
            f"worst KKT residual {kkt.worst:.2e}"
        )
        if opts.check_kkt and not kkt.satisfied(opts.tol):
            raise SolverError(
                f"KKT certificate failed: worst residual {kkt.worst:.3e} > {opts.tol:g}"
            )
        return QpSolution(
            x=frozen_array(x),
            objective=objective,
            multipliers_eq=frozen_array(mu_eq),
            multipliers_in=frozen_array(mu_in),
            active_in=tuple(sorted(in_work)),
            iterations=iterations,
            kkt=kkt,
        )

    @staticmethod
    def _step(H: np.ndarray, g: np.ndarray, Z: np.ndarray) -> Tuple[np.ndarray, bool]:
        """
        Minimising step inside range(Z). Returns a descent ray when the reduced
        Hessian is singular along a direction in which the gradient still decreases.
        """
        n = g.size
        if Z.shape[1] == 0:
            return np.zeros(n), False
        Hz = Z.T @ H @ Z
        gz = Z.T @ g
        vals, vecs = np.linalg.eigh(0.5 * (Hz + Hz.T))
        curvature_tol = 1e-12 * max(1.0, np.abs(vals).max(initial=0.0))
        flat = vals <= curvature_tol
        ge = vecs.T @ gz
        gscale = 1e-12 * max(1.0, np.abs(g).max(initial=0.0))
        if np.any(np.abs(ge[flat]) > gscale):
            direction = -(vecs[:, flat] @ ge[flat])
            return Z @ direction, True
        pe = np.zeros_like(ge)
        pe[~flat] = -ge[~flat] / vals[~flat]
        return Z @ (vecs @ pe), False
