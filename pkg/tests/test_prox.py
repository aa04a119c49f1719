import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asyncadmm.problems import LogisticObjective, QuadraticObjective, Regularizer
from asyncadmm.prox import (
    FistaConfig,
    dual_update,
    master_prox,
    soft_threshold,
    worker_subproblem,
)

from conftest import logistic_problem, quad_problem


def subproblem_gradient(obj, x, lam, anchor, rho):
    return obj.gradient(x) + lam + rho * (x - anchor)


def gd_oracle(obj, lam, anchor, rho, max_steps=1_000_000, tol=1e-12):
    """Plain (unaccelerated) gradient descent, long horizon."""
    x = anchor.copy()
    step = 1.0 / (obj.lipschitz + rho)
    for _ in range(max_steps):
        g = subproblem_gradient(obj, x, lam, anchor, rho)
        if np.linalg.norm(g) <= tol:
            break
        x = x - step * g
    return x


class TestSoftThreshold:
    def test_zero_threshold_is_identity(self, rng):
        v = rng.standard_normal(6)
        assert np.array_equal(soft_threshold(v, 0.0), v)

    def test_hand_example(self):
        assert np.allclose(soft_threshold(np.array([3.0, -1.0]), 2.0),
                           np.array([1.0, 0.0]))

    def test_tie_maps_to_zero(self):
        assert soft_threshold(np.array([2.0, -2.0]), 2.0).tolist() == [0.0, 0.0]

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(np.zeros(2), -0.1)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=5),
           st.floats(0, 3))
    def test_grid_refinement_oracle(self, vals, t):
        # componentwise: output minimizes 0.5*(u-v)^2 + t*|u| per 1-d refinement
        v = np.array(vals)
        out = soft_threshold(v, t)
        for j in range(len(v)):
            lo, hi = -6.0, 6.0
            for _ in range(40):  # bisect the grid around the best point
                grid = np.linspace(lo, hi, 33)
                costs = 0.5 * (grid - v[j]) ** 2 + t * np.abs(grid)
                b = grid[np.argmin(costs)]
                width = (hi - lo) / 8
                lo, hi = b - width, b + width
            best = 0.5 * (b - v[j]) ** 2 + t * abs(b)
            ours = 0.5 * (out[j] - v[j]) ** 2 + t * abs(out[j])
            assert ours <= best + 1e-9


class TestWorkerSubproblem:
    def test_identity_quadratic_halves_anchor(self, rng):
        obj = QuadraticObjective(np.eye(3), np.zeros(3))
        v = rng.standard_normal(3)
        res = worker_subproblem(obj, np.zeros(3), v, 1.0)
        assert np.allclose(res.x, v / 2, atol=1e-12)

    @pytest.mark.parametrize("family", ["quadratic", "logistic"])
    def test_fixed_point_when_lam_cancels_gradient(self, family):
        if family == "quadratic":
            obj = quad_problem(seed=2, N=1, n=3).locals[0]
        else:
            obj = logistic_problem(seed=2, m=20, n=3, N=1).locals[0]
        anchor = np.array([0.3, -0.1, 0.7])
        lam = -obj.gradient(anchor)
        res = worker_subproblem(obj, lam, anchor, 2.0, FistaConfig(grad_tol=1e-10))
        assert np.allclose(res.x, anchor, atol=1e-7)
        g = subproblem_gradient(obj, res.x, lam, anchor, 2.0)
        assert np.linalg.norm(g) <= 1e-7

    def test_logistic_matches_long_gd_oracle(self, rng):
        obj = logistic_problem(seed=6, m=8, n=3, N=1).locals[0]
        lam = rng.standard_normal(3) * 0.1
        anchor = rng.standard_normal(3)
        res = worker_subproblem(obj, lam, anchor, 0.5, FistaConfig(grad_tol=1e-8))
        x_gd = gd_oracle(obj, lam, anchor, 0.5)
        assert np.linalg.norm(res.x - x_gd) <= 1e-4

    def test_quadratic_optimality_1e10(self, rng):
        obj = quad_problem(seed=7, N=1, n=5).locals[0]
        lam, anchor = rng.standard_normal(5), rng.standard_normal(5)
        res = worker_subproblem(obj, lam, anchor, 3.0)
        assert res.grad_norm <= 1e-10
        assert res.converged

    def test_logistic_optimality_grad_tol(self, rng):
        obj = logistic_problem(seed=7, m=30, n=4, N=1).locals[0]
        cfg = FistaConfig(grad_tol=1e-6)
        res = worker_subproblem(obj, np.zeros(4), rng.standard_normal(4), 1.0, cfg)
        assert res.converged and res.grad_norm <= 1e-6

    def test_fista_auto_step_always_converges(self, rng):
        # spec property: auto stepsize, max_inner 50k, grad_tol 1e-6
        for seed in range(5):
            obj = logistic_problem(seed=seed, m=40, n=5, N=1).locals[0]
            res = worker_subproblem(obj, rng.standard_normal(5),
                                    rng.standard_normal(5), 0.05,
                                    FistaConfig(grad_tol=1e-6, max_inner=50_000))
            assert res.converged

    def test_divergent_stepsize_raises(self):
        obj = logistic_problem(seed=3, m=20, n=3, N=1).locals[0]
        huge = 1e6 / (obj.lipschitz + 1.0)
        with pytest.raises(ValueError, match="stepsize"):
            worker_subproblem(obj, np.zeros(3), np.ones(3) * 5, 1.0,
                              FistaConfig(stepsize=huge, grad_tol=1e-10))

    def test_max_inner_flags_nonconverged(self):
        obj = logistic_problem(seed=3, m=20, n=3, N=1).locals[0]
        res = worker_subproblem(obj, np.ones(3), np.ones(3), 0.1,
                                FistaConfig(grad_tol=1e-14, max_inner=3))
        assert not res.converged

    def test_rho_must_be_positive(self):
        obj = quad_problem(seed=2, N=1, n=2).locals[0]
        with pytest.raises(ValueError):
            worker_subproblem(obj, np.zeros(2), np.zeros(2), 0.0)


class TestDualUpdate:
    def test_zero_residual_keeps_lam(self, rng):
        lam = rng.standard_normal(4)
        v = rng.standard_normal(4)
        assert np.array_equal(dual_update(lam, v, v, 3.0), lam)

    def test_direct_formula(self):
        e1 = np.array([1.0, 0.0])
        assert np.allclose(dual_update(np.zeros(2), e1, np.zeros(2), 2.0), 2 * e1)

    def test_gradient_identity_after_exact_solve(self, rng):
        obj = quad_problem(seed=9, N=1, n=4).locals[0]
        lam, anchor = rng.standard_normal(4), rng.standard_normal(4)
        res = worker_subproblem(obj, lam, anchor, 2.5)
        lam_new = dual_update(lam, res.x, anchor, 2.5)
        assert np.linalg.norm(obj.gradient(res.x) + lam_new) <= 1e-10

    def test_gradient_identity_inexact_logistic(self, rng):
        obj = logistic_problem(seed=9, m=30, n=4, N=1).locals[0]
        cfg = FistaConfig(grad_tol=1e-7)
        lam, anchor = rng.standard_normal(4) * 0.1, rng.standard_normal(4)
        res = worker_subproblem(obj, lam, anchor, 1.0, cfg)
        lam_new = dual_update(lam, res.x, anchor, 1.0)
        assert np.linalg.norm(obj.gradient(res.x) + lam_new) <= cfg.grad_tol


def subgradient_violation(reg, x0, g):
    """Componentwise distance of g to the subdifferential of h at x0."""
    if reg.kind == "zero":
        return np.abs(g)
    if reg.kind == "box":
        out = np.abs(g).astype(float)
        out[x0 >= reg.bound - 1e-12] = np.maximum(0.0, -g[x0 >= reg.bound - 1e-12])
        out[x0 <= -reg.bound + 1e-12] = np.maximum(0.0, g[x0 <= -reg.bound + 1e-12])
        return out
    mu = reg.weight
    return np.where(x0 != 0.0, np.abs(g - mu * np.sign(x0)),
                    np.maximum(0.0, np.abs(g) - mu))


class TestMasterProx:
    def test_mean_when_duals_zero(self, rng):
        xs = rng.standard_normal((4, 3))
        out = master_prox(Regularizer.zero(), np.zeros(3), xs.sum(axis=0),
                          np.zeros(3), 1.5, 0.0, 4)
        assert np.allclose(out, xs.mean(axis=0))

    def test_inactive_box_unchanged(self, rng):
        xs = 0.1 * rng.standard_normal((3, 4))
        z = master_prox(Regularizer.zero(), np.zeros(4), xs.sum(axis=0),
                        np.zeros(4), 1.0, 0.0, 3)
        out = master_prox(Regularizer.box(10.0), np.zeros(4), xs.sum(axis=0),
                          np.zeros(4), 1.0, 0.0, 3)
        assert np.array_equal(out, z)

    def test_l1_subgradient_containment(self, rng):
        reg = Regularizer.l1(0.7)
        lam_sum = rng.standard_normal(4)
        x_sum = rng.standard_normal(4) * 2
        x0_prev = rng.standard_normal(4)
        rho, gamma, N = 1.3, 0.4, 5
        out = master_prox(reg, lam_sum, x_sum, x0_prev, rho, gamma, N)
        # 0 must lie in the subdifferential of the full objective at out
        g = lam_sum + rho * (x_sum - N * out) - gamma * (out - x0_prev)
        assert np.max(subgradient_violation(reg, out, g)) <= 1e-10

    @pytest.mark.parametrize("reg", [Regularizer.zero(), Regularizer.box(0.5),
                                     Regularizer.l1(0.9)])
    def test_optimality_all_regularizers(self, reg, rng):
        for _ in range(20):
            lam_sum = rng.standard_normal(3)
            x_sum = rng.standard_normal(3) * 3
            x0_prev = rng.standard_normal(3)
            rho, gamma, N = 2.0, 1.0, 4
            out = master_prox(reg, lam_sum, x_sum, x0_prev, rho, gamma, N)
            g = lam_sum + rho * (x_sum - N * out) - gamma * (out - x0_prev)
            assert np.max(subgradient_violation(reg, out, g)) <= 1e-9

    def test_requires_positive_weight(self):
        with pytest.raises(ValueError):
            master_prox(Regularizer.zero(), np.zeros(2), np.zeros(2),
                        np.zeros(2), 0.0, 0.0, 3)
