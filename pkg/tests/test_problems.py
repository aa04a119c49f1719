import math

import numpy as np
import pytest

from asyncadmm.problems import (
    ConsensusProblem,
    DimensionMismatch,
    LogisticObjective,
    PowerIterationError,
    QuadraticObjective,
    Regularizer,
    SolveBudgetExceeded,
    estimate_lipschitz,
    local_gradient,
    objective_value,
    power_iteration_lmax,
    solve_reference,
)

from conftest import logistic_problem, quad_problem


def scalar_loop_objective(problem, x):
    """Independent evaluation by plain scalar loops (no numpy reductions)."""
    total = 0.0
    for obj in problem.locals:
        if isinstance(obj, QuadraticObjective):
            acc = 0.0
            for a in range(problem.n):
                for b in range(problem.n):
                    acc += 0.5 * x[a] * obj.Q[a, b] * x[b]
                acc += obj.q[a] * x[a]
            total += acc
        else:
            for j in range(obj.m):
                z = 0.0
                for a in range(problem.n):
                    z += obj.A[j, a] * x[a]
                total += math.log(1.0 + math.exp(-obj.y[j] * z))
    if problem.reg.kind == "box":
        if any(abs(v) > problem.reg.bound for v in x):
            return math.inf
    elif problem.reg.kind == "l1":
        total += problem.reg.weight * sum(abs(v) for v in x)
    return total


def finite_difference_gradient(obj, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
    return g


class TestObjectiveValue:
    def test_identity_quadratic_at_origin(self):
        p = ConsensusProblem(2, [QuadraticObjective(np.eye(2), np.zeros(2))])
        assert objective_value(p, np.zeros(2)) == 0.0

    def test_logistic_satisfied_margins(self, rng):
        # all labels correct with positive margin: each term in (0, log 2)
        A = rng.standard_normal((20, 3))
        x = rng.standard_normal(3)
        y = np.sign(A @ x)
        y[y == 0] = 1.0
        obj = LogisticObjective(A, y)
        val = obj.value(x)
        assert 0.0 < val < 20 * math.log(2)

    def test_matches_scalar_loop_oracle(self, rng):
        p = quad_problem(seed=9, N=2, n=3)
        x = rng.standard_normal(3)
        assert objective_value(p, x) == pytest.approx(
            scalar_loop_objective(p, x), rel=1e-12)

    def test_logistic_scalar_loop_oracle(self, rng):
        p = logistic_problem(seed=9, m=24, n=3, N=2)
        x = rng.standard_normal(3)
        assert objective_value(p, x) == pytest.approx(
            scalar_loop_objective(p, x), rel=1e-10)

    def test_outside_box_is_infinite(self):
        p = ConsensusProblem(2, [QuadraticObjective(np.eye(2), np.zeros(2))],
                             Regularizer.box(1.0))
        assert objective_value(p, np.array([2.0, 0.0])) == math.inf

    def test_dimension_mismatch(self, small_quadratic):
        with pytest.raises(DimensionMismatch):
            objective_value(small_quadratic, np.zeros(small_quadratic.n + 1))


class TestLocalGradient:
    def test_identity_quadratic(self):
        obj = QuadraticObjective(np.eye(3), np.zeros(3))
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.allclose(local_gradient(obj, e1), e1)

    def test_logistic_at_zero(self, rng):
        A = rng.standard_normal((10, 4))
        y = np.where(rng.random(10) < 0.5, 1.0, -1.0)
        obj = LogisticObjective(A, y)
        assert np.allclose(local_gradient(obj, np.zeros(4)), -0.5 * A.T @ y)

    def test_matches_finite_differences(self, rng):
        obj = LogisticObjective(rng.standard_normal((15, 4)),
                                np.where(rng.random(15) < 0.5, 1.0, -1.0))
        x = rng.standard_normal(4)
        fd = finite_difference_gradient(obj, x)
        g = local_gradient(obj, x)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))

    def test_gradient_check_100_points(self, rng):
        # spec invariant: every family, >= 100 random points
        objs = [quad_problem(seed=4, N=1, n=3).locals[0],
                logistic_problem(seed=4, m=20, n=3, N=1).locals[0]]
        for obj in objs:
            for _ in range(100):
                x = rng.standard_normal(3) * 2.0
                fd = finite_difference_gradient(obj, x)
                g = obj.gradient(x)
                assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))


class TestEstimateLipschitz:
    def test_diagonal(self):
        obj = QuadraticObjective(np.diag([1.0, 4.0]), np.zeros(2))
        assert estimate_lipschitz(obj) == pytest.approx(4.0, rel=1e-7)

    def test_logistic_identity_features(self):
        obj = LogisticObjective(np.eye(3), np.ones(3))
        assert estimate_lipschitz(obj) == pytest.approx(0.25, rel=1e-7)

    def test_matches_dense_eigensolve(self, rng):
        A = rng.standard_normal((5, 3))
        obj = LogisticObjective(A, np.where(rng.random(5) < 0.5, 1.0, -1.0))
        expected = np.linalg.eigvalsh(A.T @ A)[-1] / 4.0
        assert estimate_lipschitz(obj) == pytest.approx(expected, rel=1e-6)

    def test_zero_matrix(self):
        obj = QuadraticObjective(np.zeros((2, 2)), np.zeros(2))
        assert obj.lipschitz == 0.0

    def test_nonconvergence_raises_with_count(self):
        Q = np.diag([1.0, 0.999])
        with pytest.raises(PowerIterationError) as exc:
            power_iteration_lmax(lambda v: Q @ v, 2, tol=1e-16, max_iter=3)
        assert exc.value.iterations == 3

    def test_lipschitz_certificate(self, rng):
        for obj in [quad_problem(seed=8, N=1, n=4).locals[0],
                    logistic_problem(seed=8, m=30, n=4, N=1).locals[0]]:
            L = obj.lipschitz
            for _ in range(50):
                x, y = rng.standard_normal(4), rng.standard_normal(4)
                lhs = np.linalg.norm(obj.gradient(x) - obj.gradient(y))
                assert lhs <= L * (1 + 1e-6) * np.linalg.norm(x - y) + 1e-12

    def test_strong_convexity_certificate(self, rng):
        obj = quad_problem(seed=8, N=1, n=4, force_extremes=True).locals[0]
        s2 = obj.strong_convexity
        for _ in range(50):
            x, y = rng.standard_normal(4), rng.standard_normal(4)
            lhs = obj.value(y)
            rhs = (obj.value(x) + obj.gradient(x) @ (y - x)
                   + 0.5 * s2 * np.linalg.norm(y - x) ** 2)
            assert lhs >= rhs - 1e-9


class TestSolveReference:
    def test_closed_form_quadratic(self):
        e1 = np.array([1.0, 0.0, 0.0])
        N = 3
        p = ConsensusProblem(3, [QuadraticObjective(np.eye(3), -e1)
                                 for _ in range(N)])
        ref = solve_reference(p, 1e-10)
        assert np.allclose(ref.x_star, e1, atol=1e-9)
        assert ref.f_star == pytest.approx(-N / 2, abs=1e-9)

    def test_binding_box_clamps(self):
        # unconstrained minimizer is e1, box 0.3 binds: x* = clamp
        e1 = np.array([1.0, 0.0])
        p = ConsensusProblem(2, [QuadraticObjective(np.eye(2), -e1)],
                             Regularizer.box(0.3))
        ref = solve_reference(p, 1e-10)
        assert np.allclose(ref.x_star, np.array([0.3, 0.0]), atol=1e-9)

    def test_logistic_against_long_gradient_descent(self, rng):
        A = rng.standard_normal((10, 3))
        y = np.where(rng.random(10) < 0.5, 1.0, -1.0)
        p = ConsensusProblem(3, [LogisticObjective(A, y)], Regularizer.box(10.0))
        ref = solve_reference(p, 1e-8)
        # independent oracle: plain projected gradient descent, long horizon
        x = np.zeros(3)
        step = 1.0 / p.total_lipschitz()
        for _ in range(200_000):
            x = np.clip(x - step * p.smooth_gradient(x), -10.0, 10.0)
        assert objective_value(p, x) == pytest.approx(ref.f_star, abs=1e-5)

    def test_tolerance_stability(self):
        p = quad_problem(seed=5, N=2, n=3)
        tol = 1e-6
        a = solve_reference(p, tol)
        b = solve_reference(p, tol / 10)
        assert abs(a.f_star - b.f_star) <= 10 * tol

    def test_budget_error_carries_best(self):
        p = quad_problem(seed=5, N=2, n=3)
        with pytest.raises(SolveBudgetExceeded) as exc:
            solve_reference(p, 1e-14, max_iter=3)
        assert exc.value.best.x_star.shape == (3,)
        assert np.isfinite(exc.value.best.f_star)


class TestValidation:
    def test_asymmetric_q_rejected(self):
        Q = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError):
            QuadraticObjective(Q, np.zeros(2))

    def test_indefinite_q_rejected(self):
        with pytest.raises(ValueError):
            QuadraticObjective(np.diag([1.0, -1.0]), np.zeros(2))

    def test_bad_labels_rejected(self, rng):
        with pytest.raises(ValueError):
            LogisticObjective(rng.standard_normal((4, 2)), np.array([1.0, 2.0, 1.0, -1.0]))

    def test_mismatched_local_dimension(self):
        objs = [QuadraticObjective(np.eye(2), np.zeros(2)),
                QuadraticObjective(np.eye(3), np.zeros(3))]
        with pytest.raises(DimensionMismatch):
            ConsensusProblem(2, objs)

    def test_regularizer_validation(self):
        with pytest.raises(ValueError):
            Regularizer.box(0.0)
        with pytest.raises(ValueError):
            Regularizer.l1(-1.0)
        with pytest.raises(ValueError):
            Regularizer("ridge")
