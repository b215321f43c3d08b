"""Tests for the operator-splitting QP solver."""

import numpy as np
import pytest
import scipy.sparse as sp

from raceloop.qp import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    QpProblem,
    QpWarmStart,
    solve_qp,
)

from oracles import brute_force_box_qp


def box_problem(H, g, lb, ub):
    n = len(g)
    return QpProblem(
        H=sp.csc_matrix(H),
        g=np.asarray(g, float),
        A_eq=sp.csc_matrix((0, n)),
        b_eq=np.zeros(0),
        A_in=sp.identity(n, format="csc"),
        lb=np.asarray(lb, float),
        ub=np.asarray(ub, float),
    )


class TestAnalyticCases:
    def test_kkt_example(self):
        # min (x1-1)^2 + (x2-2)^2  s.t. x1 + x2 <= 2  ->  (0.5, 1.5)
        prob = QpProblem(
            H=sp.csc_matrix(2.0 * np.eye(2)),
            g=np.array([-2.0, -4.0]),
            A_eq=sp.csc_matrix((0, 2)),
            b_eq=np.zeros(0),
            A_in=sp.csc_matrix(np.array([[1.0, 1.0]])),
            lb=np.array([-np.inf]),
            ub=np.array([2.0]),
        )
        sol = solve_qp(prob, tol=1e-8)
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.z, [0.5, 1.5], atol=1e-6)

    def test_unconstrained_quadratic(self):
        n = 5
        prob = QpProblem(
            H=sp.csc_matrix(2.0 * np.eye(n)),
            g=-2.0 * np.ones(n),
            A_eq=sp.csc_matrix((0, n)),
            b_eq=np.zeros(0),
            A_in=sp.csc_matrix((0, n)),
            lb=np.zeros(0),
            ub=np.zeros(0),
        )
        sol = solve_qp(prob)
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.z, np.ones(n), atol=1e-6)

    def test_equality_constrained(self):
        # min ||x||^2 s.t. x1 + x2 = 1; solution (0.5, 0.5).
        prob = QpProblem(
            H=sp.csc_matrix(2.0 * np.eye(2)),
            g=np.zeros(2),
            A_eq=sp.csc_matrix(np.array([[1.0, 1.0]])),
            b_eq=np.array([1.0]),
            A_in=sp.csc_matrix((0, 2)),
            lb=np.zeros(0),
            ub=np.zeros(0),
        )
        sol = solve_qp(prob)
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.z, [0.5, 0.5], atol=1e-6)
        assert sol.primal_residual <= 1e-6


class TestAgainstBruteForceOracle:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_small_boxed_qps(self, seed):
        rng = np.random.default_rng(seed)
        n, n_boxed = 8, 6
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.5 * np.eye(n)
        g = rng.normal(size=n)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        idx = rng.permutation(n)[:n_boxed]
        lb[idx] = rng.uniform(-1.0, 0.0, size=n_boxed)
        ub[idx] = lb[idx] + rng.uniform(0.2, 1.5, size=n_boxed)

        expected = brute_force_box_qp(H, g, lb, ub)
        sol = solve_qp(box_problem(H, g, lb, ub), tol=1e-8)
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.z, expected, atol=1e-5)

    def test_twenty_vars_ten_boxes(self):
        rng = np.random.default_rng(12345)
        n, n_boxed = 20, 10
        M = rng.normal(size=(n, n))
        H = M.T @ M + 1.0 * np.eye(n)
        g = rng.normal(size=n)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        idx = rng.permutation(n)[:n_boxed]
        lb[idx] = rng.uniform(-0.8, 0.0, size=n_boxed)
        ub[idx] = lb[idx] + rng.uniform(0.2, 1.0, size=n_boxed)

        expected = brute_force_box_qp(H, g, lb, ub)
        sol = solve_qp(box_problem(H, g, lb, ub), tol=1e-8)
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.z, expected, atol=1e-5)


class TestContracts:
    def test_residuals_meet_tolerance(self):
        rng = np.random.default_rng(7)
        n = 12
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.1 * np.eye(n)
        g = rng.normal(size=n)
        lb = np.full(n, -0.5)
        ub = np.full(n, 0.5)
        tol = 1e-6
        sol = solve_qp(box_problem(H, g, lb, ub), tol=tol)
        assert sol.status == OPTIMAL
        assert sol.primal_residual <= tol
        assert sol.dual_residual <= tol * (1.0 + np.abs(g).max())

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        n = 10
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.2 * np.eye(n)
        g = rng.normal(size=n)
        prob = lambda: box_problem(H, g, np.full(n, -1.0), np.full(n, 1.0))
        s1 = solve_qp(prob())
        s2 = solve_qp(prob())
        assert np.array_equal(s1.z, s2.z)
        assert np.array_equal(s1.y, s2.y)
        assert s1.iterations == s2.iterations

    def test_max_iter_returns_flagged_best_iterate(self):
        rng = np.random.default_rng(2)
        n = 12
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.1 * np.eye(n)
        g = rng.normal(size=n)
        sol = solve_qp(box_problem(H, g, np.full(n, -1.0), np.full(n, 1.0)), max_iter=3)
        assert sol.status == MAX_ITER
        assert sol.z.shape == (n,)
        assert np.all(np.isfinite(sol.z))

    def test_infeasible_detected(self):
        # x <= 0 and x >= 1 cannot both hold.
        prob = QpProblem(
            H=sp.csc_matrix(np.array([[2.0]])),
            g=np.array([0.0]),
            A_eq=sp.csc_matrix((0, 1)),
            b_eq=np.zeros(0),
            A_in=sp.csc_matrix(np.array([[1.0], [1.0]])),
            lb=np.array([-np.inf, 1.0]),
            ub=np.array([0.0, np.inf]),
        )
        sol = solve_qp(prob)
        assert sol.status == INFEASIBLE

    def test_warm_start_matches_cold_objective(self):
        rng = np.random.default_rng(9)
        n = 15
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.3 * np.eye(n)
        g = rng.normal(size=n)
        prob = box_problem(H, g, np.full(n, -0.7), np.full(n, 0.7))
        cold = solve_qp(prob)
        warm = solve_qp(prob, warm_start=QpWarmStart(z=cold.z, y=cold.y))
        assert cold.status == OPTIMAL and warm.status == OPTIMAL
        assert abs(cold.objective - warm.objective) <= 1e-6
        assert warm.iterations <= cold.iterations

    def test_problem_dimension_validation(self):
        with pytest.raises(ValueError):
            QpProblem(
                H=sp.csc_matrix(np.eye(3)),
                g=np.zeros(2),
                A_eq=sp.csc_matrix((0, 2)),
                b_eq=np.zeros(0),
                A_in=sp.csc_matrix((0, 2)),
                lb=np.zeros(0),
                ub=np.zeros(0),
            )
