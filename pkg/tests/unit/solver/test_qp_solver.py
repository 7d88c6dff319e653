"""Unit tests for the active-set quadratic program solver."""

import numpy as np
import pytest

from errors import DimensionError, InfeasibleProblemError, SolverError
from qp_solver import ActiveSetSolver, SolverOptions, kkt_residuals

pytestmark = pytest.mark.solver


@pytest.fixture
def solver():
    return ActiveSetSolver()


class TestActiveSetSolver:
    def test_unconstrained_minimum(self, solver):
        sol = solver.solve(np.diag([2.0, 4.0]), [-2.0, -4.0])
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)
        assert sol.objective == pytest.approx(-3.0)

    def test_equality_constrained(self, solver):
        sol = solver.solve(2.0 * np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[2.0])
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)
        assert sol.objective == pytest.approx(2.0)

    def test_linear_program_on_the_simplex(self, solver):
        sol = solver.solve(
            np.zeros((2, 2)),
            [1.0, 2.0],
            A_eq=[[1.0, 1.0]],
            b_eq=[10.0],
            A_in=-np.eye(2),
            b_in=np.zeros(2),
        )
        np.testing.assert_allclose(sol.x, [10.0, 0.0], atol=1e-9)
        assert sol.objective == pytest.approx(10.0)
        assert sol.active_in == (1,)

    def test_multipliers_of_a_linear_program(self, solver):
        sol = solver.solve(
            np.zeros((2, 2)),
            [-1.0, -2.0],
            A_in=np.vstack([[1.0, 1.0], -np.eye(2)]),
            b_in=[1.0, 0.0, 0.0],
            x0=[0.0, 0.0],
        )
        np.testing.assert_allclose(sol.x, [0.0, 1.0], atol=1e-10)
        np.testing.assert_allclose(sol.multipliers_in, [2.0, 1.0, 0.0], atol=1e-10)
        assert sol.kkt.satisfied(1e-10)

    def test_bound_constraint_becomes_active(self, solver):
        # unconstrained minimum at (-1, 2), clipped to x >= 0
        sol = solver.solve(
            2.0 * np.eye(2), [2.0, -4.0], A_in=-np.eye(2), b_in=np.zeros(2), x0=[0.0, 0.0]
        )
        np.testing.assert_allclose(sol.x, [0.0, 2.0], atol=1e-10)
        assert sol.active_in == (0,)
        assert sol.multipliers_in[0] == pytest.approx(2.0)

    def test_infeasible_system_names_violated_rows(self, solver):
        with pytest.raises(InfeasibleProblemError) as exc:
            solver.solve(
                np.eye(2),
                [0.0, 0.0],
                A_eq=[[1.0, 1.0]],
                b_eq=[5.0],
                A_in=[[1.0, 1.0]],
                b_in=[2.0],
                eq_names=["group:a"],
                in_names=["budget"],
            )
        assert exc.value.violated
        assert set(exc.value.violated) <= {"group:a", "budget"}

    def test_unbounded_objective(self, solver):
        with pytest.raises(SolverError, match="unbounded"):
            solver.solve(np.zeros((1, 1)), [-1.0], A_in=[[-1.0]], b_in=[0.0], x0=[0.0])

    def test_iteration_limit(self):
        solver = ActiveSetSolver(SolverOptions(max_iter=1))
        with pytest.raises(SolverError, match="iteration limit"):
            solver.solve(
                np.zeros((2, 2)),
                [-1.0, -2.0],
                A_in=np.vstack([[1.0, 1.0], -np.eye(2)]),
                b_in=[1.0, 0.0, 0.0],
                x0=[0.0, 0.0],
            )

    def test_infeasible_start_point_is_replaced(self, solver):
        sol = solver.solve(
            2.0 * np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[2.0], x0=[5.0, 5.0]
        )
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)

    def test_redundant_equality_rows(self, solver):
        sol = solver.solve(
            2.0 * np.eye(2),
            [0.0, 0.0],
            A_eq=[[1.0, 1.0], [2.0, 2.0]],
            b_eq=[2.0, 4.0],
        )
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)

    def test_shape_checks(self, solver):
        with pytest.raises(DimensionError):
            solver.solve(np.eye(3), [0.0, 0.0])
        with pytest.raises(DimensionError):
            solver.solve(np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[1.0, 2.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_random_problems_are_certified_and_optimal(self, solver, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        M = rng.normal(size=(n, n))
        H = M.T @ M * rng.uniform(0, 1) + np.diag(rng.uniform(0, 1, n))
        c = rng.normal(size=n)
        A_in = np.vstack([np.ones((1, n)), -np.eye(n)])
        b_in = np.r_[rng.uniform(0.5, 3.0), np.zeros(n)]
        sol = solver.solve(H, c, A_in=A_in, b_in=b_in, x0=np.zeros(n))
        assert sol.kkt.worst <= 1e-8

        def f(x):
            return 0.5 * x @ H @ x + c @ x

        # random feasible points never beat the certified optimum
        for _ in range(200):
            w = rng.dirichlet(np.ones(n + 1))[:n] * b_in[0]
            assert f(w) >= sol.objective - 1e-9


class TestKktResiduals:
    def test_zero_at_the_optimum(self):
        res = kkt_residuals(
            2.0 * np.eye(2),
            np.zeros(2),
            np.array([[1.0, 1.0]]),
            np.array([2.0]),
            np.zeros((0, 2)),
            np.zeros(0),
            np.array([1.0, 1.0]),
            np.array([-2.0]),
            np.zeros(0),
        )
        assert res.worst == pytest.approx(0.0, abs=1e-15)

    def test_negative_inequality_multiplier_is_dual_infeasible(self):
        res = kkt_residuals(
            np.zeros((1, 1)),
            np.array([1.0]),
            np.zeros((0, 1)),
            np.zeros(0),
            np.array([[-1.0]]),
            np.array([0.0]),
            np.array([0.0]),
            np.zeros(0),
            np.array([-1.0]),
        )
        assert res.dual > 0
        assert not res.satisfied(1e-8)
