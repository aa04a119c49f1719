"""Consensus problem model: local objectives, regularizers, reference solves.

The solver operates on a shared-variable consensus formulation: N local
smooth convex costs f_i over R^n plus one nonsmooth convex regularizer h
applied to the shared variable. Two local families are supported, a PSD
quadratic (exact subproblem solves, known curvature constants) and a
binary logistic loss (iterative subproblem solves).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class DimensionMismatch(ValueError):
    """Input vector/matrix dimensions do not match the declared sizes."""


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge within its iteration cap."""

    def __init__(self, iterations: int, last_estimate: float):
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last estimate {last_estimate:.6e})"
        )
        self.iterations = iterations
        self.last_estimate = last_estimate


class SolveBudgetExceeded(RuntimeError):
    """Centralized reference solve hit its iteration cap.

    Carries the best iterate found so far in ``best`` (a ReferenceSolution
    whose ``tolerance`` records the residual actually reached).
    """

    def __init__(self, message: str, best: "ReferenceSolution"):
        super().__init__(message)
        self.best = best


def _as_vector(x, n: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionMismatch(f"{name} has shape {x.shape}, expected ({n},)")
    return x


def power_iteration_lmax(matvec, dim: int, tol: float = 1e-8,
                         max_iter: int = 200_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as a matvec.

    Stops when the Rayleigh quotient is stationary to ``tol`` relative.
    Deterministic: the start vector comes from a fixed-seed generator.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w <= 1e-300:
            return 0.0  # operator annihilates the iterate: top eigenvalue 0 for PSD
        v = w / norm_w
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-12):
            return lam_new
        lam = lam_new
    raise PowerIterationError(max_iter, lam)


@dataclass(eq=False)
class QuadraticObjective:
    """f(x) = 0.5 x'Qx + q'x with Q symmetric PSD.

    ``lipschitz`` is lambda_max(Q) (power iteration) and
    ``strong_convexity`` is lambda_min(Q) (dense eigensolve), both
    computed at construction unless given.
    """

    Q: np.ndarray
    q: np.ndarray
    lipschitz: float | None = None
    strong_convexity: float | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        if self.Q.shape != (n, n):
            raise DimensionMismatch(f"Q has shape {self.Q.shape}, expected ({n},{n})")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if self.lipschitz is None:
            self.lipschitz = estimate_lipschitz(self)
        if self.strong_convexity is None:
            lo = float(np.linalg.eigvalsh(self.Q)[0])
            if lo < -1e-8 * max(1.0, float(self.lipschitz)):
                raise ValueError(f"Q is not PSD (lambda_min={lo:.3e})")
            self.strong_convexity = max(lo, 0.0)
        self._chol_cache: dict[float, tuple] = {}

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def value(self, x: np.ndarray) -> float:
        x = _as_vector(x, self.n)
        return float(0.5 * x @ (self.Q @ x) + self.q @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _as_vector(x, self.n)
        return self.Q @ x + self.q

    def solve_shifted(self, rhs: np.ndarray, rho: float) -> np.ndarray:
        """Solve (Q + rho*I) x = rhs exactly. The factorization is cached per rho."""
        from scipy.linalg import cho_factor, cho_solve
        key = float(rho)
        fac = self._chol_cache.get(key)
        if fac is None:
            fac = cho_factor(self.Q + rho * np.eye(self.n))
            self._chol_cache[key] = fac
        return cho_solve(fac, rhs)


@dataclass(eq=False)
class LogisticObjective:
    """f(x) = sum_j log(1 + exp(-y_j a_j'x)) for labels y in {-1,+1}.

    ``lipschitz`` is lambda_max(A'A)/4 (power iteration on the Gram
    operator); the loss is convex but not strongly convex, so
    ``strong_convexity`` is 0.
    """

    A: np.ndarray
    y: np.ndarray
    lipschitz: float | None = None
    strong_convexity: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.A.ndim != 2:
            raise DimensionMismatch("A must be a 2-d matrix")
        if self.y.shape != (self.A.shape[0],):
            raise DimensionMismatch(
                f"labels have shape {self.y.shape}, expected ({self.A.shape[0]},)")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ValueError("labels must be +1/-1")
        if self.lipschitz is None:
            self.lipschitz = estimate_lipschitz(self)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def value(self, x: np.ndarray) -> float:
        x = _as_vector(x, self.n)
        z = self.y * (self.A @ x)
        return float(np.sum(np.logaddexp(0.0, -z)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _as_vector(x, self.n)
        z = self.y * (self.A @ x)
        s = expit(-z)  # 1 / (1 + exp(z))
        return -(self.A.T @ (self.y * s))


LocalObjective = QuadraticObjective | LogisticObjective


def local_gradient(obj: LocalObjective, x: np.ndarray) -> np.ndarray:
    """Gradient of one local cost at x (dimension-checked)."""
    return obj.gradient(x)


def estimate_lipschitz(obj: LocalObjective, tol: float = 1e-8,
                       max_iter: int = 200_000) -> float:
    """Gradient-Lipschitz constant of one local cost via power iteration.

    Quadratic: lambda_max(Q). Logistic: lambda_max(A'A)/4 (the sigmoid
    curvature bound); the Gram operator is applied as A'(A v) so the
    m x m product is never formed.
    """
    if isinstance(obj, QuadraticObjective):
        return power_iteration_lmax(lambda v: obj.Q @ v, obj.n, tol, max_iter)
    A = obj.A
    lmax = power_iteration_lmax(lambda v: A.T @ (A @ v), obj.n, tol, max_iter)
    return lmax / 4.0


@dataclass(frozen=True)
class Regularizer:
    """The shared nonsmooth term h: none, a box indicator, or an l1 penalty."""

    kind: str  # "zero" | "box" | "l1"
    bound: float = 0.0   # box half-width
    weight: float = 0.0  # l1 weight

    def __post_init__(self):
        if self.kind not in ("zero", "box", "l1"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "box" and not (0.0 < self.bound < math.inf):
            raise ValueError("box bound must be finite and positive")
        if self.kind == "l1" and self.weight < 0.0:
            raise ValueError("l1 weight must be nonnegative")

    @classmethod
    def zero(cls) -> "Regularizer":
        return cls("zero")

    @classmethod
    def box(cls, bound: float) -> "Regularizer":
        return cls("box", bound=float(bound))

    @classmethod
    def l1(cls, weight: float) -> "Regularizer":
        return cls("l1", weight=float(weight))

    def value(self, x: np.ndarray) -> float:
        """h(x); +inf (the explicit infinite sentinel) outside the box."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "box":
            return 0.0 if np.all(np.abs(x) <= self.bound) else math.inf
        return float(self.weight * np.sum(np.abs(x)))

    def prox(self, z: np.ndarray, quad_weight: float) -> np.ndarray:
        """argmin_u h(u) + (quad_weight/2)||u - z||^2, in closed form."""
        if quad_weight <= 0.0:
            raise ValueError("prox requires a positive quadratic weight")
        if self.kind == "zero":
            return z.copy()
        if self.kind == "box":
            return np.clip(z, -self.bound, self.bound)
        t = self.weight / quad_weight
        return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "box":
            d["bound"] = self.bound
        if self.kind == "l1":
            d["weight"] = self.weight
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Regularizer":
        return cls(d["kind"], bound=d.get("bound", 0.0), weight=d.get("weight", 0.0))


@dataclass(eq=False)
class ConsensusProblem:
    """N local costs over R^n plus one shared regularizer."""

    n: int
    locals: list
    reg: Regularizer = field(default_factory=Regularizer.zero)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if len(self.locals) < 1:
            raise ValueError("need at least one worker objective")
        for i, obj in enumerate(self.locals):
            if obj.n != self.n:
                raise DimensionMismatch(
                    f"objective {i} has dimension {obj.n}, expected {self.n}")

    @property
    def N(self) -> int:
        return len(self.locals)

    def smooth_value(self, x: np.ndarray) -> float:
        return sum(obj.value(x) for obj in self.locals)

    def smooth_gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n)
        for obj in self.locals:
            g += obj.gradient(x)
        return g

    def max_lipschitz(self) -> float:
        return max(obj.lipschitz for obj in self.locals)

    def total_lipschitz(self) -> float:
        return sum(obj.lipschitz for obj in self.locals)

    def min_strong_convexity(self) -> float:
        return min(obj.strong_convexity for obj in self.locals)


def objective_value(p: ConsensusProblem, x: np.ndarray) -> float:
    """Centralized objective sum_i f_i(x) + h(x); +inf outside the box."""
    x = _as_vector(x, p.n)
    h = p.reg.value(x)
    if math.isinf(h):
        return math.inf
    return p.smooth_value(x) + h


@dataclass
class ReferenceSolution:
    """High-accuracy centralized solution used as the optimality oracle."""

    x_star: np.ndarray
    f_star: float
    tolerance: float
    iterations: int = 0


def solve_reference(p: ConsensusProblem, tol: float,
                    max_iter: int = 500_000) -> ReferenceSolution:
    """Centralized accelerated proximal-gradient solve of the consensus problem.

    Runs until the prox-gradient mapping norm at the iterate is <= tol
    (step 1/L with L = sum of local Lipschitz constants; gradient-based
    adaptive restart). Raises SolveBudgetExceeded carrying the best
    iterate if the cap is hit.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    L = p.total_lipschitz()
    step = 1.0 / L if L > 0 else 1.0
    x = np.zeros(p.n)
    y = x.copy()
    t = 1.0
    best_x, best_res = x.copy(), math.inf
    for it in range(1, max_iter + 1):
        g_y = p.smooth_gradient(y)
        x_new = p.reg.prox(y - step * g_y, 1.0 / step)
        # mapping norm at x_new: one more prox-gradient probe
        g_x = p.smooth_gradient(x_new)
        x_probe = p.reg.prox(x_new - step * g_x, 1.0 / step)
        res = float(np.linalg.norm((x_new - x_probe) / step))
        if res < best_res:
            best_res, best_x = res, x_new.copy()
        if res <= tol:
            return ReferenceSolution(x_new, objective_value(p, x_new), tol, it)
        if (y - x_new) @ (x_new - x) > 0.0:  # momentum points uphill: restart
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
    best = ReferenceSolution(best_x, objective_value(p, best_x), best_res, max_iter)
    raise SolveBudgetExceeded(
        f"reference solve did not reach tol={tol:.1e} in {max_iter} iterations "
        f"(best residual {best_res:.3e})", best)
