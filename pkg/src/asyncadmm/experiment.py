"""Experiment orchestration: configs, reference oracles, artifact emission.

An experiment is one JSON-serializable config: problem source, protocol
parameters, backend choice plus timing model, optional certification and
trace checks. Artifacts written per run: trace.csv (scalar telemetry),
trace.npz (full history for the validators), certificate.json,
checks.json, run.log. On the sim backend identical config + seed gives
byte-identical CSVs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import data as datamod
from .analysis import (
    CheckReport,
    RateCertificate,
    augmented_lagrangian,
    certify,
    check_consensus_bound,
    check_descent_lemma,
    check_envelope,
    check_gamma0_bound,
    check_weighted_delay_bound,
    kkt_residuals,
    measure_S,
)
from .problems import ConsensusProblem, QuadraticObjective, Regularizer, objective_value, solve_reference
from .protocol import ProtocolConfig, StoppingRule, run_to_completion
from .simnet import SimConfig, SimTransport
from .tcpnet import TcpTransport
from .trace import Trace


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ProblemSpec:
    kind: str              # "quadratic" | "logistic" | "libsvm" | "csv"
    N: int
    n: int = 0
    m: int = 0             # synthetic logistic sample count
    seed: int | None = None
    sig_min: float = 1.0   # quadratic spectrum bounds
    sig_max: float = 5.0
    force_extremes: bool = False
    scale: float = 0.25    # synthetic logistic feature scale
    path: str | None = None
    reg: Regularizer = field(default_factory=Regularizer.zero)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "N": self.N, "n": self.n, "m": self.m,
                "seed": self.seed, "sig_min": self.sig_min,
                "sig_max": self.sig_max, "force_extremes": self.force_extremes,
                "scale": self.scale, "path": self.path,
                "reg": self.reg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        d = dict(d)
        d["reg"] = Regularizer.from_dict(d.get("reg", {"kind": "zero"}))
        return cls(**d)


@dataclass
class CertifySpec:
    S: int | None = None          # None: measured from the trace as max|A_k|+1
    c: float | None = None
    gamma_floor: float | None = None

    def to_dict(self) -> dict:
        return {"S": self.S, "c": self.c, "gamma_floor": self.gamma_floor}

    @classmethod
    def from_dict(cls, d: dict) -> "CertifySpec":
        return cls(**d)


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    protocol: ProtocolConfig
    backend: str = "sim"   # "sim" | "tcp"
    sim: SimConfig = field(default_factory=SimConfig)
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    reference_tol: float | None = None  # None: 1e-10 quadratic / 1e-8 logistic
    certificate: CertifySpec | None = None
    checks: list = field(default_factory=list)  # [{"name": ..., ...params}]
    store_history: bool = True  # off: keep scalar telemetry + x0 history only
    out_dir: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {"problem": self.problem.to_dict(),
                "protocol": self.protocol.to_dict(),
                "backend": self.backend, "sim": self.sim.to_dict(),
                "tcp_host": self.tcp_host, "tcp_port": self.tcp_port,
                "reference_tol": self.reference_tol,
                "certificate": self.certificate.to_dict() if self.certificate else None,
                "checks": self.checks, "store_history": self.store_history,
                "out_dir": self.out_dir, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(problem=ProblemSpec.from_dict(d["problem"]),
                   protocol=ProtocolConfig.from_dict(d["protocol"]),
                   backend=d.get("backend", "sim"),
                   sim=SimConfig.from_dict(d.get("sim", {})),
                   tcp_host=d.get("tcp_host", "127.0.0.1"),
                   tcp_port=d.get("tcp_port", 0),
                   reference_tol=d.get("reference_tol"),
                   certificate=(CertifySpec.from_dict(d["certificate"])
                                if d.get("certificate") else None),
                   checks=d.get("checks", []),
                   store_history=d.get("store_history", True),
                   out_dir=d.get("out_dir"), seed=d.get("seed", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_problem(spec: ProblemSpec, default_seed: int = 0) -> ConsensusProblem:
    seed = spec.seed if spec.seed is not None else default_seed
    if spec.kind == "quadratic":
        return datamod.make_quadratic_problem(
            spec.N, spec.n, seed, spec.sig_min, spec.sig_max, spec.reg,
            spec.force_extremes)
    if spec.kind == "logistic":
        problem, _ = datamod.make_logistic_problem(
            spec.m, spec.n, spec.N, seed, scale=spec.scale, reg=spec.reg)
        return problem
    if spec.kind in ("libsvm", "csv"):
        if spec.path is None:
            raise ValueError(f"{spec.kind} problem needs a dataset path")
        if spec.kind == "libsvm":
            X, y = datamod.parse_libsvm(spec.path, n=spec.n or None)
        else:
            X, y = datamod.load_csv_dataset(spec.path)
        problem, _ = datamod.problem_from_dataset(X, y, spec.N, seed, spec.reg)
        return problem
    raise ValueError(f"unknown problem kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# synchronous reference oracle


def sync_reference(p: ConsensusProblem, rho: float, iters: int,
                   grad_tol: float = 1e-10,
                   f_star: float | None = None) -> Trace:
    """Standalone synchronous consensus-ADMM recursion, used as an oracle.

    Deliberately independent of the protocol and prox modules: quadratic
    subproblems are plain dense solves, smooth ones run L-BFGS, and the
    shared-variable prox is inlined per regularizer. Each iteration runs
    the full worker block against the current shared point, then the
    dual step, then the shared update without the damping term (the
    classic cycle entered at the worker step, so iterate indices align
    with an async trace one-for-one).
    """
    N, n = p.N, p.n
    x0 = np.zeros(n)
    X = np.zeros((N, n))
    Lam = np.zeros((N, n))
    trace = Trace(n, N, rho, 0.0, 1, N, f_star=f_star,
                  meta={"backend": "sync-oracle", "L": p.max_lipschitz(),
                        "sigma2": p.min_strong_convexity(), "grad_tol": grad_tol,
                        "stop_reason": "iters"})
    trace.append_state(x0, X, Lam,
                       augmented_lagrangian(p, X, x0, Lam, rho),
                       objective_value(p, x0))
    everyone = tuple(range(N))
    eye = np.eye(n)
    for k in range(iters):
        for i, obj in enumerate(p.locals):
            if isinstance(obj, QuadraticObjective):
                X[i] = np.linalg.solve(obj.Q + rho * eye,
                                       rho * x0 - Lam[i] - obj.q)
            else:
                lam_i = Lam[i].copy()
                anchor = x0.copy()

                def fg(xv, obj=obj, lam_i=lam_i, anchor=anchor):
                    d = xv - anchor
                    val = obj.value(xv) + lam_i @ xv + 0.5 * rho * (d @ d)
                    grad = obj.gradient(xv) + lam_i + rho * d
                    return val, grad

                res = minimize(fg, X[i], jac=True, method="L-BFGS-B",
                               options={"gtol": grad_tol / (10.0 * np.sqrt(n)),
                                        "maxiter": 20_000, "ftol": 0.0})
                X[i] = res.x
            Lam[i] = Lam[i] + rho * (X[i] - x0)
        z = (Lam.sum(axis=0) + rho * X.sum(axis=0)) / (N * rho)
        if p.reg.kind == "zero":
            x0 = z
        elif p.reg.kind == "box":
            x0 = np.minimum(np.maximum(z, -p.reg.bound), p.reg.bound)
        else:
            t = p.reg.weight / (N * rho)
            x0 = np.sign(z) * np.maximum(np.abs(z) - t, 0.0)
        trace.append_iteration(everyone, np.zeros(N, dtype=int))
        trace.append_state(x0, X, Lam,
                           augmented_lagrangian(p, X, x0, Lam, rho),
                           objective_value(p, x0), time=float(k + 1))
    return trace


# ---------------------------------------------------------------------------
# run orchestration


@dataclass
class ExperimentResult:
    converged: bool
    checks_passed: bool
    stop_reason: str
    iterations: int
    final_objective: float
    f_star: float
    trace: Trace
    certificate: RateCertificate | None
    reports: list
    paths: dict

    @property
    def ok(self) -> bool:
        return self.converged and self.checks_passed


_CHECK_DISPATCH = {
    "descent": lambda trace, cert, kw: check_descent_lemma(trace, **kw),
    "consensus": lambda trace, cert, kw: check_consensus_bound(trace, **kw),
    "gamma0": lambda trace, cert, kw: check_gamma0_bound(trace, **kw),
    "envelope": lambda trace, cert, kw: check_envelope(trace, cert, **kw),
    "delay": lambda trace, cert, kw: check_weighted_delay_bound(
        trace, kw.pop("eta", cert.eta if cert else None), **kw),
}


def run_checks(trace: Trace, specs: list, cert: RateCertificate | None) -> list[CheckReport]:
    reports = []
    for spec in specs:
        kw = dict(spec)
        name = kw.pop("name")
        if name not in _CHECK_DISPATCH:
            raise ValueError(f"unknown check {name!r}")
        reports.append(_CHECK_DISPATCH[name](trace, cert, kw))
    return reports


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Build, reference-solve, run, validate, and write artifacts.

    Partial artifacts are retained and the failure cause is appended to
    run.log if any stage raises.
    """
    out = Path(out_dir if out_dir is not None else (cfg.out_dir or "."))
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "run.log"
    paths = {"log": str(log_path)}

    def log(msg):
        stamp = time.strftime("%Y-%m-%d %H:%M:%S")
        with open(log_path, "a") as fh:
            fh.write(f"{stamp} {msg}\n")

    log(f"start backend={cfg.backend} seed={cfg.seed}")
    try:
        problem = build_problem(cfg.problem, cfg.seed)
        log(f"problem kind={cfg.problem.kind} N={problem.N} n={problem.n} "
            f"L={problem.max_lipschitz():.6g} sigma2={problem.min_strong_convexity():.6g}")

        ref_tol = cfg.reference_tol
        if ref_tol is None:
            quad = all(isinstance(o, QuadraticObjective) for o in problem.locals)
            ref_tol = 1e-10 if quad else 1e-8
        ref = solve_reference(problem, ref_tol)
        log(f"reference f_star={ref.f_star!r} tol={ref_tol} iters={ref.iterations}")

        proto = cfg.protocol
        stop = proto.stop
        if stop.target_gap_rel is not None and stop.target_objective is None:
            gap0 = objective_value(problem, np.zeros(problem.n)) - ref.f_star
            target = ref.f_star + stop.target_gap_rel * gap0
            stop = StoppingRule(max_iter=stop.max_iter, target_objective=target,
                                target_gap_rel=stop.target_gap_rel,
                                consensus_tol=stop.consensus_tol,
                                stationarity_tol=stop.stationarity_tol)
            proto = ProtocolConfig(rho=proto.rho, gamma=proto.gamma, tau=proto.tau,
                                   a_min=proto.a_min, fista=proto.fista, stop=stop)
            log(f"resolved target objective {target!r}")

        sim = cfg.sim
        if cfg.backend == "sim":
            if cfg.problem.seed is None and sim.seed == 0 and cfg.seed != 0:
                sim = SimConfig(seed=cfg.seed, compute=sim.compute,
                                latency=sim.latency, master_compute=sim.master_compute)
            transport = SimTransport(sim, store_history=cfg.store_history)
        elif cfg.backend == "tcp":
            transport = TcpTransport(cfg.tcp_host, cfg.tcp_port,
                                     store_history=cfg.store_history)
        else:
            raise ValueError(f"unknown backend {cfg.backend!r}")

        trace = run_to_completion(problem, proto, transport, f_star=ref.f_star)
        stop_reason = trace.meta.get("stop_reason", "unknown")
        log(f"run done iterations={trace.iterations} stop={stop_reason} "
            f"objective={trace.objective[-1]!r}")

        trace.write_csv(out / "trace.csv")
        trace.save_npz(out / "trace.npz")
        paths["trace_csv"] = str(out / "trace.csv")
        paths["trace_npz"] = str(out / "trace.npz")

        cert = None
        if cfg.certificate is not None:
            cs = cfg.certificate
            cert = certify(problem.max_lipschitz(), problem.min_strong_convexity(),
                           problem.N, cs.S if cs.S is not None else measure_S(trace),
                           proto.tau, gamma_floor=cs.gamma_floor, c=cs.c)
            (out / "certificate.json").write_text(cert.to_json() + "\n")
            paths["certificate"] = str(out / "certificate.json")
            log(f"certificate rho={cert.rho!r} gamma={cert.gamma!r} eta={cert.eta!r}")

        reports = run_checks(trace, cfg.checks, cert)
        if reports:
            (out / "checks.json").write_text(
                json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
            paths["checks"] = str(out / "checks.json")
        for r in reports:
            log(f"check {r.name}: {'pass' if r.passed else 'FAIL'} "
                f"({len(r.violations)} violations, {len(r.burn_in)} burn-in)")

        res = kkt_residuals(problem, trace.x_cache(trace.iterations),
                            trace.x0(trace.iterations),
                            trace.lam_cache(trace.iterations))
        log(f"kkt stationarity={res.stationarity:.3e} consensus={res.consensus:.3e} "
            f"x0_opt={res.x0_opt:.3e}")

        converged = stop_reason in ("target_objective", "residuals")
        checks_passed = all(r.passed for r in reports)
        log(f"result converged={converged} checks_passed={checks_passed}")
        return ExperimentResult(
            converged=converged, checks_passed=checks_passed,
            stop_reason=stop_reason, iterations=trace.iterations,
            final_objective=trace.objective[-1], f_star=ref.f_star,
            trace=trace, certificate=cert, reports=reports, paths=paths)
    except Exception as exc:
        log(f"FAILED: {type(exc).__name__}: {exc}")
        raise
