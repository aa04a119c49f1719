"""Subproblem solvers: worker updates, the master's proximal step, FISTA.

Quadratic worker subproblems are solved exactly (one SPD linear solve);
logistic ones run an accelerated gradient loop until the subproblem
gradient norm drops below the configured tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import (
    DimensionMismatch,
    LocalObjective,
    QuadraticObjective,
    Regularizer,
    _as_vector,
)


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """Componentwise shrinkage sign(v)*max(|v|-t, 0); exact zeros at |v|<=t."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def project_box(v: np.ndarray, bound: float) -> np.ndarray:
    """Componentwise clamp to [-bound, bound]."""
    return np.clip(v, -bound, bound)


@dataclass
class FistaConfig:
    """Inner-solver configuration for smooth worker subproblems.

    stepsize None means automatic 1/(L_i + rho). An explicit stepsize is
    accepted as-is (the loop aborts with an error if iterates diverge to
    non-finite values rather than silently returning garbage).
    """

    stepsize: float | None = None
    grad_tol: float = 1e-6
    max_inner: int = 50_000

    def __post_init__(self):
        if self.stepsize is not None and self.stepsize <= 0:
            raise ValueError("stepsize must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.max_inner < 1:
            raise ValueError("max_inner must be >= 1")

    def to_dict(self) -> dict:
        return {"stepsize": self.stepsize, "grad_tol": self.grad_tol,
                "max_inner": self.max_inner}

    @classmethod
    def from_dict(cls, d: dict) -> "FistaConfig":
        return cls(stepsize=d.get("stepsize"), grad_tol=d.get("grad_tol", 1e-6),
                   max_inner=d.get("max_inner", 50_000))


@dataclass
class SubproblemResult:
    x: np.ndarray
    inner_iters: int
    grad_norm: float
    converged: bool


def fista_smooth(grad, x0: np.ndarray, step: float, grad_tol: float,
                 max_inner: int) -> tuple[np.ndarray, int, float, bool]:
    """Accelerated gradient descent on a smooth function until ||grad|| <= tol.

    The cheap per-iteration check uses the gradient at the extrapolated
    point; the exact stopping gradient is evaluated at the candidate
    iterate once the cheap check fires, so the reported norm is honest.
    """
    x = x0.copy()
    g = grad(x)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= grad_tol:
        return x, 0, gnorm, True
    y = x.copy()
    t = 1.0
    x_prev = x.copy()
    for it in range(1, max_inner + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            g_y = grad(y)
            x = y - step * g_y
        if not np.all(np.isfinite(x)):
            raise ValueError(
                f"inner solver diverged at iteration {it}; stepsize {step:.3e} "
                "is too large for this subproblem")
        if float(np.linalg.norm(g_y)) <= grad_tol:
            g = grad(x)
            gnorm = float(np.linalg.norm(g))
            if gnorm <= grad_tol:
                return x, it, gnorm, True
        if (y - x) @ (x - x_prev) > 0.0:
            t = 1.0
            y = x.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x + ((t - 1.0) / t_new) * (x - x_prev)
            t = t_new
        x_prev = x
    gnorm = float(np.linalg.norm(grad(x)))
    return x, max_inner, gnorm, gnorm <= grad_tol


def worker_subproblem(obj: LocalObjective, lam: np.ndarray, anchor: np.ndarray,
                      rho: float, cfg: FistaConfig | None = None,
                      x_start: np.ndarray | None = None) -> SubproblemResult:
    """min_x f_i(x) + x'lam + (rho/2)||x - anchor||^2.

    Quadratic family: exact SPD solve (Q + rho I) x = rho*anchor - lam - q.
    Otherwise: FISTA from ``x_start`` (the worker's previous iterate;
    defaults to the anchor) with automatic stepsize 1/(L_i + rho).
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    n = obj.n
    lam = _as_vector(lam, n, "lam")
    anchor = _as_vector(anchor, n, "anchor")
    cfg = cfg or FistaConfig()

    if isinstance(obj, QuadraticObjective):
        x = obj.solve_shifted(rho * anchor - lam - obj.q, rho)
        res = obj.gradient(x) + lam + rho * (x - anchor)
        return SubproblemResult(x, 0, float(np.linalg.norm(res)), True)

    def grad(x):
        return obj.gradient(x) + lam + rho * (x - anchor)

    step = cfg.stepsize if cfg.stepsize is not None else 1.0 / (obj.lipschitz + rho)
    start = anchor if x_start is None else _as_vector(x_start, n, "x_start")
    x, iters, gnorm, ok = fista_smooth(grad, start, step, cfg.grad_tol, cfg.max_inner)
    return SubproblemResult(x, iters, gnorm, ok)


def dual_update(lam: np.ndarray, x_new: np.ndarray, anchor: np.ndarray,
                rho: float) -> np.ndarray:
    """lam + rho * (x_new - anchor)."""
    n = lam.shape[0]
    x_new = _as_vector(x_new, n, "x_new")
    anchor = _as_vector(anchor, n, "anchor")
    return lam + rho * (x_new - anchor)


def master_prox(reg: Regularizer, lam_sum: np.ndarray, x_sum: np.ndarray,
                x0_prev: np.ndarray, rho: float, gamma: float, N: int) -> np.ndarray:
    """Shared-variable update in closed form.

    Minimizes h(x0) - x0'lam_sum + (rho/2) sum_i ||x_i - x0||^2
    + (gamma/2)||x0 - x0_prev||^2: collapse the smooth part to its
    unconstrained minimizer z = (lam_sum + rho*x_sum + gamma*x0_prev) / w
    with w = N*rho + gamma, then apply the prox of h at weight w.
    """
    w = N * rho + gamma
    if w <= 0:
        raise ValueError("N*rho + gamma must be positive")
    z = (lam_sum + rho * x_sum + gamma * x0_prev) / w
    return reg.prox(z, w)
