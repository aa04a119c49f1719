"""Linear-rate certificates and per-iteration inequality validators.

``certify`` turns problem constants (L, sigma^2, N, S, tau, optional
Hoffman constant c) into the parameter thresholds (rho, gamma, delta)
and the geometric factor eta = 1 + 1/(delta*gamma) under which the
augmented-Lagrangian gap contracts. The ``check_*`` functions replay a
finished trace against the geometric envelope, the per-iteration descent
inequality, the consensus-error bound, the weighted delay-sum bound, and
the gamma=0 gap bound. All checks are pure functions of the trace.

Applicability: the descent and consensus bounds consume the worker
optimality identity grad f_i(x_i^k) + lam_i^k = 0 at *both* ends of the
dual-difference terms. With zero-initialized duals that identity only
holds from each worker's first completed update onward, so iterations
whose reference index is the initial state (kbar or khat = -1 for an
arrived worker) are reported as burn-in and not scored as violations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .problems import ConsensusProblem, Regularizer, _as_vector
from .trace import Trace


class PreconditionError(ValueError):
    """A validator or certificate was invoked outside its hypotheses."""


def augmented_lagrangian(p: ConsensusProblem, xs, x0, lams, rho: float) -> float:
    """sum_i f_i(x_i) + h(x0) + sum_i lam_i'(x_i - x0) + (rho/2) sum_i ||x_i - x0||^2.

    Returns +inf when x0 falls outside a box regularizer.
    """
    x0 = _as_vector(x0, p.n, "x0")
    xs = np.asarray(xs, dtype=float)
    lams = np.asarray(lams, dtype=float)
    if xs.shape != (p.N, p.n) or lams.shape != (p.N, p.n):
        raise ValueError(f"expected ({p.N},{p.n}) stacks of worker vectors")
    h = p.reg.value(x0)
    if math.isinf(h):
        return math.inf
    total = h
    for i, obj in enumerate(p.locals):
        r = xs[i] - x0
        total += obj.value(xs[i]) + float(lams[i] @ r) + 0.5 * rho * float(r @ r)
    return total


def _subgradient_distance(reg: Regularizer, x0: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Componentwise distance of s to the subdifferential of h at x0."""
    if reg.kind == "zero":
        return np.abs(s)
    if reg.kind == "box":
        b = reg.bound
        tol = 1e-12 * max(1.0, b)
        out = np.abs(s).astype(float)
        at_hi = x0 >= b - tol
        at_lo = x0 <= -b + tol
        out[at_hi] = np.maximum(0.0, -s[at_hi])
        out[at_lo] = np.maximum(0.0, s[at_lo])
        return out
    mu = reg.weight
    out = np.where(x0 != 0.0, np.abs(s - mu * np.sign(x0)),
                   np.maximum(0.0, np.abs(s) - mu))
    return out


@dataclass
class KKTResiduals:
    stationarity: float  # max_i ||grad f_i(x_i) + lam_i||
    consensus: float     # max_i ||x_i - x0||
    x0_opt: float        # distance of sum_i lam_i to the subdifferential of h at x0


def kkt_residuals(p: ConsensusProblem, xs, x0, lams) -> KKTResiduals:
    x0 = _as_vector(x0, p.n, "x0")
    xs = np.asarray(xs, dtype=float)
    lams = np.asarray(lams, dtype=float)
    stat = 0.0
    cons = 0.0
    for i, obj in enumerate(p.locals):
        stat = max(stat, float(np.linalg.norm(obj.gradient(xs[i]) + lams[i])))
        cons = max(cons, float(np.linalg.norm(xs[i] - x0)))
    s = lams.sum(axis=0)
    x0_opt = float(np.linalg.norm(_subgradient_distance(p.reg, x0, s)))
    return KKTResiduals(stat, cons, x0_opt)


# ---------------------------------------------------------------------------
# rate certificate


@dataclass
class RateCertificate:
    """Parameter thresholds and the geometric contraction factor.

    ``rho``/``gamma`` are the operating values (the thresholds, or the
    caller's floor when larger); ``delta`` is the smallest admissible
    constant at those values and ``eta`` the resulting factor, so the
    certified envelope is gap_{k+1} <= eta^-(k+1) * gap_0.
    """

    L: float
    sigma2: float
    N: int
    S: int
    tau: int
    c: float | None
    alpha: float
    beta: float
    rho_min: float
    gamma_min: float
    rho: float
    gamma: float
    delta: float
    eta: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "L", "sigma2", "N", "S", "tau", "c", "alpha", "beta",
            "rho_min", "gamma_min", "rho", "gamma", "delta", "eta")}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RateCertificate":
        return cls(**d)


def certify(L: float, sigma2: float, N: int, S: int, tau: int,
            gamma_floor: float | None = None, c: float | None = None) -> RateCertificate:
    """Compute the linear-convergence parameter thresholds.

    Strongly convex route when c is None (needs sigma2 > 0); composite
    route when the Hoffman constant c is supplied (sigma2 is then the
    modulus of the inner strongly convex function and must be > 0).
    alpha is rho-free, so rho_min is explicit; beta is evaluated at the
    returned rho, then gamma, then the smallest admissible delta.
    """
    if L <= 0:
        raise PreconditionError("L must be positive")
    if N < 1 or not (1 <= S <= N) or tau < 1:
        raise PreconditionError("need N >= 1, 1 <= S <= N, tau >= 1")
    if c is None:
        if sigma2 <= 0:
            raise PreconditionError(
                "strong convexity modulus is 0: certification needs the "
                "error-bound (Hoffman) constant c for the composite route")
    else:
        if c <= 0:
            raise PreconditionError("Hoffman constant c must be positive")
        if sigma2 <= 0:
            raise PreconditionError(
                "the composite route still needs the inner strong-convexity "
                "modulus sigma2 > 0")

    alpha = 1.0 + (2.0 + 2.0 ** tau * (tau - 1)) / (1.0 + 8.0 * N * sigma2)
    one_l2 = 1.0 + L * L
    rho_min = max(0.5 * (one_l2 + math.sqrt(one_l2 * one_l2 + 8.0 * L * L * alpha)),
                  sigma2 + 1.0 / (8.0 * N))
    rho = rho_min
    beta = 2.0 * (tau - 1) * (
        0.5 * ((1.0 + rho * rho) * S + S / N) * (2.0 ** (tau - 1) - 1.0)
        + (4.0 ** (tau - 1) - 1.0))
    if c is None:
        gamma_min = max(beta - N * rho / 2.0 + 1.0, 8.0 * N * (rho - sigma2))
    else:
        gamma_min = max(beta - N * rho / 2.0 + 1.0,
                        8.0 * N * (rho - sigma2 / c) + 4.0 * N * sigma2)
    gamma = gamma_min if gamma_floor is None else max(gamma_min, gamma_floor)
    denom = sigma2 * N if c is None else N * sigma2 / c
    delta = max(1.0, (rho * N + gamma) / denom - 1.0)
    eta = 1.0 + 1.0 / (delta * gamma)

    assert alpha >= 1.0
    assert beta >= 0.0 and (tau > 1 or beta == 0.0)
    assert eta > 1.0
    return RateCertificate(L=L, sigma2=sigma2, N=N, S=S, tau=tau, c=c,
                           alpha=alpha, beta=beta, rho_min=rho_min,
                           gamma_min=gamma_min, rho=rho, gamma=gamma,
                           delta=delta, eta=eta)


def measure_S(trace: Trace) -> int:
    """max_k |A_k| + 1: the smallest strict arrival-count bound on the trace."""
    if trace.iterations == 0:
        return 1
    return max(len(a) for a in trace.arrivals) + 1


# ---------------------------------------------------------------------------
# trace checks


@dataclass
class CheckReport:
    name: str
    passed: bool
    iterations_checked: int
    violations: list = field(default_factory=list)  # dicts: k, kind, lhs, rhs, margin
    burn_in: list = field(default_factory=list)     # iterations not scored (see module doc)
    worst_margin: float | None = None               # min of rhs + slack - lhs over scored ks
    margins: list = field(default_factory=list)     # per scored iteration, in k order
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "iterations_checked": self.iterations_checked,
                "violations": self.violations, "burn_in": self.burn_in,
                "worst_margin": self.worst_margin, "margins": self.margins,
                "params": self.params}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, **kw)


def _finish(report: CheckReport) -> CheckReport:
    report.passed = not report.violations
    if report.margins:
        report.worst_margin = min(report.margins)
    return report


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(d @ d)


def _applicable_flags(trace: Trace) -> list[bool]:
    """Per-iteration applicability of the identity-dependent bounds."""
    flags = []
    for k in range(trace.iterations):
        ok = True
        arrived = set(trace.arrivals[k])
        for i in range(trace.N):
            if i in arrived:
                if trace.kbar(i, k) < 0:
                    ok = False
            else:
                kt = trace.ktilde(i, k)
                if kt >= 0 and trace.khat(i, k) < 0:
                    ok = False
        flags.append(ok)
    return flags


def check_envelope(trace: Trace, cert: RateCertificate, slack: float = 1e-9,
                   anchor: int | None = None) -> CheckReport:
    """Geometric envelope gap_{k+1} <= eta^-(k+1-k0) * gap_{k0} + slack,
    plus gap_k >= -slack at every k.

    The contraction's hypotheses include the worker optimality identity
    at the cached pairs, which zero-initialized duals only satisfy after
    each worker's first update, so by default the envelope is anchored at
    k0 = the first iteration from which every later iteration is
    applicable (k0 = 0 when the whole trace is). The skipped head is
    reported as burn-in; pass anchor=0 to force the literal k0 = 0 form.
    """
    if trace.f_star is None:
        raise PreconditionError("envelope check needs f_star on the trace")
    if cert.gamma <= 0 or cert.eta <= 1.0:
        raise PreconditionError("envelope check needs gamma > 0 and eta > 1 "
                                "(use check_gamma0_bound for gamma = 0 runs)")
    if anchor is None:
        flags = _applicable_flags(trace)
        bad = [k for k, ok in enumerate(flags) if not ok]
        anchor = (bad[-1] + 1) if bad else 0
    rep = CheckReport("envelope", True, trace.iterations,
                      params={"eta": cert.eta, "slack": slack, "anchor": anchor,
                              "delta_anchor": trace.delta(anchor),
                              "delta0": trace.delta(0)})
    d_anchor = trace.delta(anchor)
    for k in range(trace.iterations):
        dk1 = trace.delta(k + 1)
        if dk1 < -slack:
            rep.violations.append({"k": k, "kind": "nonnegative", "lhs": dk1,
                                   "rhs": 0.0, "margin": dk1 + slack})
        if k < anchor:
            rep.burn_in.append(k)
            continue
        ub = d_anchor / cert.eta ** (k + 1 - anchor)
        margin = ub + slack - dk1
        rep.margins.append(margin)
        if margin < 0:
            rep.violations.append({"k": k, "kind": "envelope", "lhs": dk1,
                                   "rhs": ub, "margin": margin})
    return _finish(rep)


def check_descent_lemma(trace: Trace, rho: float | None = None,
                        gamma: float | None = None, L: float | None = None,
                        eps: float | None = None, slack: float = 1e-9) -> CheckReport:
    """Per-iteration descent of the augmented-Lagrangian gap.

    gap_{k+1} <= gap_k
      + ((1 + rho/eps)/2) * sum_{i in A_k} ||x0^k - x0^{kbar_i+1}||^2
      - ((2 gamma + N rho)/2) * ||x0^{k+1} - x0^k||^2
      + ((L^2 + (eps-1) rho)/2 + L^2/rho) * sum_{i in A_k} ||x_i^{k+1} - x_i^k||^2
      + slack

    with eps = 1/rho by default. Requires rho >= L and eps in (0,1).
    Comparing Lagrangian values directly, f_star cancels; the gap_{k+1}
    >= -slack side is additionally checked when f_star is present.
    """
    rho = trace.rho if rho is None else rho
    gamma = trace.gamma if gamma is None else gamma
    L = trace.meta.get("L") if L is None else L
    if L is None:
        raise PreconditionError("L not in trace metadata; pass it explicitly")
    if rho < L:
        raise PreconditionError(f"descent bound requires rho >= L (rho={rho}, L={L})")
    eps = 1.0 / rho if eps is None else eps
    if not (0.0 < eps < 1.0):
        raise PreconditionError(
            f"eps must lie in (0,1); the default 1/rho needs rho > 1 (eps={eps})")
    c_gap = 0.5 * (1.0 + rho / eps)
    c_move = 0.5 * (L * L + (eps - 1.0) * rho) + L * L / rho
    c_x0 = 0.5 * (2.0 * gamma + trace.N * rho)
    rep = CheckReport("descent", True, trace.iterations,
                      params={"rho": rho, "gamma": gamma, "L": L, "eps": eps,
                              "slack": slack})
    for k in range(trace.iterations):
        gaps = 0.0
        moves = 0.0
        applicable = True
        for i in trace.arrivals[k]:
            kb = trace.kbar(i, k)
            if kb < 0:
                applicable = False
            gaps += _sqdist(trace.x0(k), trace.x0(kb + 1))
            moves += _sqdist(trace.x_cache(k + 1)[i], trace.x_cache(k)[i])
        rhs = (trace.lagrangian[k] + c_gap * gaps
               - c_x0 * _sqdist(trace.x0(k + 1), trace.x0(k)) + c_move * moves)
        lhs = trace.lagrangian[k + 1]
        margin = rhs + slack - lhs
        if not applicable:
            rep.burn_in.append(k)
            continue
        rep.margins.append(margin)
        if margin < 0:
            rep.violations.append({"k": k, "kind": "descent", "lhs": lhs,
                                   "rhs": rhs, "margin": margin})
        if trace.f_star is not None and trace.delta(k + 1) < -slack:
            rep.violations.append({"k": k, "kind": "nonnegative",
                                   "lhs": trace.delta(k + 1), "rhs": 0.0,
                                   "margin": trace.delta(k + 1) + slack})
    return _finish(rep)


def _staleness_terms(trace: Trace, k: int):
    """Move and gap sums split by arrival status at iteration k.

    Returns (moves_arrived, moves_stale, gaps_arrived, gaps_stale,
    applicable). A worker that has never arrived contributes zero move
    and a gap referenced to x0^0 (both exact, since its cached copy still
    equals the initial shared point).
    """
    moves_a = gaps_a = 0.0
    moves_s = gaps_s = 0.0
    applicable = True
    arrived = set(trace.arrivals[k])
    for i in range(trace.N):
        if i in arrived:
            kb = trace.kbar(i, k)
            if kb < 0:
                applicable = False
            moves_a += _sqdist(trace.x_cache(k + 1)[i], trace.x_cache(k)[i])
            gaps_a += _sqdist(trace.x0(kb + 1), trace.x0(k))
        else:
            kt = trace.ktilde(i, k)
            if kt < 0:
                gaps_s += _sqdist(trace.x0(0), trace.x0(k))
                continue
            kh = trace.khat(i, k)
            if kh < 0:
                applicable = False
            moves_s += _sqdist(trace.x_cache(kt + 1)[i], trace.x_cache(kt)[i])
            gaps_s += _sqdist(trace.x0(kh + 1), trace.x0(k))
    return moves_a, moves_s, gaps_a, gaps_s, applicable


def check_consensus_bound(trace: Trace, L: float | None = None,
                          rho: float | None = None, slack: float = 1e-9) -> CheckReport:
    """Consensus-error bound.

    sum_i ||x_i^{k+1} - x0^{k+1}||^2 <=
        (2L^2/rho^2) [ sum_{A_k} ||x_i^{k+1}-x_i^k||^2
                       + sum_{A_k^c} ||x_i^{ktilde+1}-x_i^{ktilde}||^2 ]
      + 4 sum_{A_k} ||x0^{kbar+1}-x0^k||^2
      + 4 sum_{A_k^c} ||x0^{khat+1}-x0^k||^2
      + 4N ||x0^{k+1}-x0^k||^2 + slack
    """
    rho = trace.rho if rho is None else rho
    L = trace.meta.get("L") if L is None else L
    if L is None:
        raise PreconditionError("L not in trace metadata; pass it explicitly")
    c_move = 2.0 * L * L / (rho * rho)
    rep = CheckReport("consensus_bound", True, trace.iterations,
                      params={"rho": rho, "L": L, "slack": slack})
    for k in range(trace.iterations):
        moves_a, moves_s, gaps_a, gaps_s, applicable = _staleness_terms(trace, k)
        lhs = float(np.sum((trace.x_cache(k + 1) - trace.x0(k + 1)) ** 2))
        rhs = (c_move * (moves_a + moves_s) + 4.0 * (gaps_a + gaps_s)
               + 4.0 * trace.N * _sqdist(trace.x0(k + 1), trace.x0(k)))
        margin = rhs + slack - lhs
        if not applicable:
            rep.burn_in.append(k)
            continue
        rep.margins.append(margin)
        if margin < 0:
            rep.violations.append({"k": k, "kind": "consensus", "lhs": lhs,
                                   "rhs": rhs, "margin": margin})
    return _finish(rep)


def check_weighted_delay_bound(trace: Trace, eta: float, nu: int,
                               subset: str = "arrivals",
                               slack: float = 1e-9) -> CheckReport:
    """Weighted delay-sum bound, verified on every trace prefix.

    sum_{j<=k} eta^j sum_{i in N_j} ||x0^j - x0^{j_i+1}||^2
      <= (nu-1) * Nbar * ((eta^{nu-1}-1)/(eta-1))
         * sum_{j<=k-1} eta^{j+1} ||x0^j - x0^{j+1}||^2 + slack

    subset "arrivals": N_j = A_j with j_i the previous arrival (use nu =
    tau); "complement": N_j = A_j^c with j_i the arrival before the most
    recent one (use nu = 2*tau - 1). Nbar is the measured max |N_j|, the
    strictest constant the bound admits. Realized indices are verified
    against the window j - nu <= j_i < j.
    """
    if eta <= 1.0:
        raise PreconditionError("eta must exceed 1")
    if nu < 1:
        raise PreconditionError("nu must be >= 1")
    if subset not in ("arrivals", "complement"):
        raise PreconditionError("subset must be 'arrivals' or 'complement'")
    K = trace.iterations
    if K * math.log(eta) > 600.0:
        raise PreconditionError("eta^K overflows for this prefix length; "
                                "check a shorter prefix or smaller eta")
    sets = []
    for j in range(K):
        if subset == "arrivals":
            sets.append(tuple(trace.arrivals[j]))
        else:
            sets.append(tuple(i for i in range(trace.N)
                              if i not in trace.arrivals[j]))
    nbar = max([1] + [len(s) for s in sets])
    geom = (eta ** (nu - 1) - 1.0) / (eta - 1.0)
    factor = (nu - 1) * nbar * geom
    rep = CheckReport(f"weighted_delay[{subset}]", True, K,
                      params={"eta": eta, "nu": nu, "nbar": nbar,
                              "subset": subset, "slack": slack})
    lhs_c = 0.0
    rhs_c = 0.0
    for j in range(K):
        term = 0.0
        for i in sets[j]:
            if subset == "arrivals":
                ji = trace.kbar(i, j)
            else:
                kt = trace.ktilde(i, j)
                ji = trace.khat(i, j) if kt >= 0 else -1
            if not (j - nu <= ji < j):
                raise PreconditionError(
                    f"realized index {ji} for worker {i} at iteration {j} falls "
                    f"outside the window [{j - nu}, {j - 1}]; nu={nu} does not "
                    f"match this subset/schedule")
            term += _sqdist(trace.x0(j), trace.x0(ji + 1))
        lhs_c += eta ** j * term
        if j >= 1:
            rhs_c += eta ** j * _sqdist(trace.x0(j - 1), trace.x0(j))
        margin = factor * rhs_c + slack - lhs_c
        rep.margins.append(margin)
        if margin < 0:
            rep.violations.append({"k": j, "kind": "delay_sum", "lhs": lhs_c,
                                   "rhs": factor * rhs_c, "margin": margin})
    return _finish(rep)


def check_gamma0_bound(trace: Trace, delta: float, L: float | None = None,
                       sigma2: float | None = None, rho: float | None = None,
                       c: float | None = None, slack: float = 1e-9) -> CheckReport:
    """gamma = 0 gap bound (the envelope substitute when eta is undefined).

    Strongly convex route (c None): requires rho > sigma2 > 0 and
    delta >= max(rho/sigma2 - 1, 1), and checks

      gap_{k+1} / (4 (rho - sigma2) N delta) <=
          (L^2/(2 rho^2 N)) [moves over A_k + stale moves over A_k^c]
        + (1/N) [gaps to kbar over A_k + gaps to khat over A_k^c]
        + ||x0^{k+1} - x0^k||^2 + slack

    Composite route (c given): same right-hand side with the left scale
    gap_{k+1} / (2N (2 (rho - sigma2/c) delta + sigma2)) and
    delta >= max(c rho/sigma2 - 1, 1).
    """
    if trace.f_star is None:
        raise PreconditionError("gamma0 bound needs f_star on the trace")
    rho = trace.rho if rho is None else rho
    L = trace.meta.get("L") if L is None else L
    sigma2 = trace.meta.get("sigma2") if sigma2 is None else sigma2
    if L is None or sigma2 is None:
        raise PreconditionError("L/sigma2 not in trace metadata; pass them explicitly")
    if sigma2 <= 0:
        raise PreconditionError("gamma0 bound needs sigma2 > 0")
    if c is None:
        if rho <= sigma2:
            raise PreconditionError("strongly convex route needs rho > sigma2")
        if delta < max(rho / sigma2 - 1.0, 1.0) - 1e-12:
            raise PreconditionError("delta below max(rho/sigma2 - 1, 1)")
        scale = 1.0 / (4.0 * (rho - sigma2) * trace.N * delta)
    else:
        if rho <= sigma2 / c:
            raise PreconditionError("composite route needs rho > sigma2/c")
        if delta < max(c * rho / sigma2 - 1.0, 1.0) - 1e-12:
            raise PreconditionError("delta below max(c*rho/sigma2 - 1, 1)")
        scale = 1.0 / (2.0 * trace.N * (2.0 * (rho - sigma2 / c) * delta + sigma2))
    c_move = L * L / (2.0 * rho * rho * trace.N)
    rep = CheckReport("gamma0_bound", True, trace.iterations,
                      params={"rho": rho, "L": L, "sigma2": sigma2,
                              "delta": delta, "c": c, "slack": slack})
    for k in range(trace.iterations):
        moves_a, moves_s, gaps_a, gaps_s, applicable = _staleness_terms(trace, k)
        lhs = scale * trace.delta(k + 1)
        rhs = (c_move * (moves_a + moves_s)
               + (gaps_a + gaps_s) / trace.N
               + _sqdist(trace.x0(k + 1), trace.x0(k)))
        margin = rhs + slack - lhs
        if not applicable:
            rep.burn_in.append(k)
            continue
        rep.margins.append(margin)
        if margin < 0:
            rep.violations.append({"k": k, "kind": "gamma0", "lhs": lhs,
                                   "rhs": rhs, "margin": margin})
    return _finish(rep)
