"""Master and worker state machines for the asynchronous consensus solver.

The master waits until enough workers have reported (>= a_min) and no
silent worker has been stale for tau-1 iterations, overwrites its cached
copies for the arrived set, refreshes delay counters, updates the shared
variable with the proximal step, and broadcasts only to the workers it
just consumed. Workers solve their local penalized subproblem against
the last shared point they received, take the dual step, and report.
The barrier enforces the bounded-delay property by construction.

Transport backends drive a MasterLoop (arrival mailbox + protocol step +
trace building); the worker update is a pure state transition reused by
the simulator, the scripted driver, and the TCP client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import augmented_lagrangian, kkt_residuals
from .problems import ConsensusProblem, DimensionMismatch, LocalObjective, objective_value
from .prox import FistaConfig, dual_update, master_prox, worker_subproblem
from .trace import ClockAccount, Trace


class ProtocolError(RuntimeError):
    """The protocol was driven outside its contract (e.g. step before ready)."""


class ProtocolInvariantError(ProtocolError):
    """An internal invariant that the barrier should make impossible failed."""


class ScheduleError(ProtocolError):
    """A scripted arrival schedule asked for an impossible arrival."""


class TransportError(RuntimeError):
    """Transport-level failure; carries the partial trace gathered so far."""

    def __init__(self, message: str, partial_trace: Trace | None = None):
        super().__init__(message)
        self.partial_trace = partial_trace


# ---------------------------------------------------------------------------
# messages


@dataclass
class Broadcast:
    x0: np.ndarray
    k: int  # diagnostic tag; protocol logic depends only on arrival order


@dataclass
class Report:
    i: int
    x: np.ndarray
    lam: np.ndarray
    k_i: int
    converged: bool = True


@dataclass
class Shutdown:
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StoppingRule:
    """When the master stops driving iterations.

    ``max_iter`` is always required (safety cap). ``target_objective``
    stops at the first iterate whose objective is <= the target;
    ``target_gap_rel`` is resolved against a reference solve into an
    absolute target (f_star + frac * initial gap) by the experiment
    layer. The residual pair stops when both the stationarity and
    consensus residuals of the master view fall below their tolerances.
    """

    max_iter: int
    target_objective: float | None = None
    target_gap_rel: float | None = None
    consensus_tol: float | None = None
    stationarity_tol: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if (self.consensus_tol is None) != (self.stationarity_tol is None):
            raise ValueError("consensus_tol and stationarity_tol go together")

    def to_dict(self) -> dict:
        return {"max_iter": self.max_iter,
                "target_objective": self.target_objective,
                "target_gap_rel": self.target_gap_rel,
                "consensus_tol": self.consensus_tol,
                "stationarity_tol": self.stationarity_tol}

    @classmethod
    def from_dict(cls, d: dict) -> "StoppingRule":
        return cls(max_iter=d["max_iter"],
                   target_objective=d.get("target_objective"),
                   target_gap_rel=d.get("target_gap_rel"),
                   consensus_tol=d.get("consensus_tol"),
                   stationarity_tol=d.get("stationarity_tol"))


@dataclass
class ProtocolConfig:
    rho: float
    gamma: float = 0.0
    tau: int = 1
    a_min: int = 1
    fista: FistaConfig = field(default_factory=FistaConfig)
    stop: StoppingRule = field(default_factory=lambda: StoppingRule(max_iter=1000))

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.a_min < 1:
            raise ValueError("a_min must be >= 1")

    def to_dict(self) -> dict:
        return {"rho": self.rho, "gamma": self.gamma, "tau": self.tau,
                "a_min": self.a_min, "fista": self.fista.to_dict(),
                "stop": self.stop.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        return cls(rho=d["rho"], gamma=d.get("gamma", 0.0), tau=d.get("tau", 1),
                   a_min=d.get("a_min", 1),
                   fista=FistaConfig.from_dict(d.get("fista", {})),
                   stop=StoppingRule.from_dict(d["stop"]))


# ---------------------------------------------------------------------------
# master


@dataclass
class MasterState:
    k: int
    x0: np.ndarray
    x_cache: np.ndarray    # (N, n): master's copies of the worker primals
    lam_cache: np.ndarray  # (N, n): master's copies of the worker duals
    d: np.ndarray          # (N,) delay counters
    pending: dict          # worker id -> Report, arrival-ordered
    last_arrival: np.ndarray  # (N,) last consumed iteration per worker, -1 initially

    @classmethod
    def initial(cls, n: int, N: int) -> "MasterState":
        return cls(k=0, x0=np.zeros(n), x_cache=np.zeros((N, n)),
                   lam_cache=np.zeros((N, n)), d=np.zeros(N, dtype=int),
                   pending={}, last_arrival=np.full(N, -1, dtype=int))

    @property
    def N(self) -> int:
        return self.x_cache.shape[0]


def barrier_ready(m: MasterState, cfg: ProtocolConfig) -> bool:
    """True iff >= a_min reports are pending and every silent worker has d < tau-1."""
    if len(m.pending) < cfg.a_min:
        return False
    for i in range(m.N):
        if i not in m.pending and m.d[i] >= cfg.tau - 1:
            return False
    return True


def master_step(m: MasterState, cfg: ProtocolConfig, reg) -> tuple[list[int], np.ndarray]:
    """Consume the pending arrival set and advance the master one iteration.

    Overwrites the cached copies for arrived workers, zeroes/advances the
    delay counters, applies the proximal update to the shared variable
    over all N cached copies, and bumps k. Returns the sorted consumed
    ids (the broadcast targets) and the pre-update counter snapshot.
    """
    if not barrier_ready(m, cfg):
        raise ProtocolError(
            f"master step before barrier: |pending|={len(m.pending)}, "
            f"a_min={cfg.a_min}, d={m.d.tolist()}, tau={cfg.tau}")
    ids = sorted(m.pending)
    d_top = m.d.copy()
    for i in ids:
        rep = m.pending[i]
        m.x_cache[i] = rep.x
        m.lam_cache[i] = rep.lam
    m.d += 1
    m.d[ids] = 0
    m.x0 = master_prox(reg, m.lam_cache.sum(axis=0), m.x_cache.sum(axis=0),
                       m.x0, cfg.rho, cfg.gamma, m.N)
    m.last_arrival[ids] = m.k
    m.k += 1
    m.pending.clear()
    if np.any(m.d > cfg.tau - 1):
        raise ProtocolInvariantError(
            f"delay counter exceeded tau-1 after a barrier pass: {m.d.tolist()}")
    return ids, d_top


# ---------------------------------------------------------------------------
# worker


@dataclass
class WorkerState:
    id: int
    obj: LocalObjective
    x: np.ndarray = None
    lam: np.ndarray = None
    k_i: int = 0

    def __post_init__(self):
        if self.x is None:
            self.x = np.zeros(self.obj.n)
        if self.lam is None:
            self.lam = np.zeros(self.obj.n)


def worker_step(w: WorkerState, x_hat0: np.ndarray, rho: float,
                cfg: FistaConfig | None = None) -> Report:
    """Solve the local subproblem against the received shared point, take
    the dual step, bump the local clock, and emit the report."""
    res = worker_subproblem(w.obj, w.lam, x_hat0, rho, cfg, x_start=w.x)
    w.x = res.x
    w.lam = dual_update(w.lam, w.x, x_hat0, rho)
    w.k_i += 1
    return Report(w.id, w.x.copy(), w.lam.copy(), w.k_i, res.converged)


# ---------------------------------------------------------------------------
# shared master loop


class MasterLoop:
    """Arrival mailbox + protocol step + trace building, backend-agnostic."""

    def __init__(self, problem: ConsensusProblem, cfg: ProtocolConfig,
                 f_star: float | None = None, meta: dict | None = None,
                 store_history: bool = True):
        if not (1 <= cfg.a_min <= problem.N):
            raise ValueError(f"a_min must lie in [1, {problem.N}]")
        self.problem = problem
        self.cfg = cfg
        self.state = MasterState.initial(problem.n, problem.N)
        base_meta = {
            "warm_start": "previous_iterate",
            "stepsize": cfg.fista.stepsize if cfg.fista.stepsize is not None else "auto",
            "grad_tol": cfg.fista.grad_tol,
            "L": problem.max_lipschitz(),
            "sigma2": problem.min_strong_convexity(),
        }
        base_meta.update(meta or {})
        self.trace = Trace(problem.n, problem.N, cfg.rho, cfg.gamma, cfg.tau,
                           cfg.a_min, f_star=f_star, meta=base_meta,
                           store_history=store_history)
        lag0 = augmented_lagrangian(problem, self.state.x_cache, self.state.x0,
                                    self.state.lam_cache, cfg.rho)
        self.trace.append_state(self.state.x0, self.state.x_cache,
                                self.state.lam_cache, lag0,
                                objective_value(problem, self.state.x0))
        self.stop_reason: str | None = None

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    def offer(self, report: Report, now: float = 0.0):
        if self.finished:
            self.trace.discarded_reports.append((report.i, report.k_i, now))
            return
        if not (0 <= report.i < self.problem.N):
            raise ProtocolError(f"report from unknown worker {report.i}")
        if report.i in self.state.pending:
            raise ProtocolInvariantError(
                f"worker {report.i} reported twice before consumption")
        if report.x.shape != (self.problem.n,) or report.lam.shape != (self.problem.n,):
            raise DimensionMismatch("report vectors have the wrong dimension")
        if not report.converged:
            self.trace.nonconverged_reports += 1
        self.state.pending[report.i] = report

    def ready(self) -> bool:
        return barrier_ready(self.state, self.cfg)

    def consume(self, now: float = 0.0, compute_cum: float = 0.0,
                wait_cum: float = 0.0) -> list[int]:
        ids, d_top = master_step(self.state, self.cfg, self.problem.reg)
        lag = augmented_lagrangian(self.problem, self.state.x_cache, self.state.x0,
                                   self.state.lam_cache, self.cfg.rho)
        obj = objective_value(self.problem, self.state.x0)
        self.trace.append_iteration(ids, d_top)
        self.trace.append_state(self.state.x0, self.state.x_cache,
                                self.state.lam_cache, lag, obj, now,
                                compute_cum, wait_cum)
        self._evaluate_stop(obj)
        return ids

    def _evaluate_stop(self, obj: float):
        stop = self.cfg.stop
        if stop.target_objective is not None and obj <= stop.target_objective:
            self.stop_reason = "target_objective"
        elif stop.consensus_tol is not None:
            res = kkt_residuals(self.problem, self.state.x_cache, self.state.x0,
                                self.state.lam_cache)
            if (res.consensus <= stop.consensus_tol
                    and res.stationarity <= stop.stationarity_tol):
                self.stop_reason = "residuals"
        if self.stop_reason is None and self.state.k >= stop.max_iter:
            self.stop_reason = "max_iter"

    def finish(self, clock: dict[str, ClockAccount] | None = None) -> Trace:
        self.trace.clock = clock or {}
        self.trace.meta["stop_reason"] = self.stop_reason
        return self.trace


# ---------------------------------------------------------------------------
# drivers


def run_scheduled(problem: ConsensusProblem, cfg: ProtocolConfig, schedule,
                  iters: int, f_star: float | None = None,
                  meta: dict | None = None, store_history: bool = True) -> Trace:
    """Drive the protocol with a scripted arrival schedule.

    ``schedule(k)`` names the workers arriving at iteration k; each must
    hold an unanswered broadcast (the script cannot forge arrivals) and
    the resulting set must satisfy the barrier, else ScheduleError /
    ProtocolError. Workers are solved in-process; useful for adversarial
    delay patterns that a timing simulator cannot pin down exactly.
    """
    loop = MasterLoop(problem, cfg, f_star,
                      meta={"backend": "scheduled", **(meta or {})},
                      store_history=store_history)
    workers = [WorkerState(i, problem.locals[i]) for i in range(problem.N)]
    inbox = [loop.state.x0.copy() for _ in range(problem.N)]
    outstanding = [True] * problem.N
    for k in range(iters):
        ids = sorted(set(int(i) for i in schedule(k)))
        for i in ids:
            if not (0 <= i < problem.N):
                raise ScheduleError(f"schedule named unknown worker {i}")
            if not outstanding[i]:
                raise ScheduleError(
                    f"worker {i} has no unanswered broadcast at iteration {k}")
            loop.offer(worker_step(workers[i], inbox[i], cfg.rho, cfg.fista))
            outstanding[i] = False
        targets = loop.consume(now=float(k + 1))
        for i in targets:
            inbox[i] = loop.state.x0.copy()
            outstanding[i] = True
        if loop.finished:
            break
    if loop.stop_reason is None:
        loop.stop_reason = "schedule_exhausted"
    return loop.finish()


def run_to_completion(problem: ConsensusProblem, cfg: ProtocolConfig, transport,
                      f_star: float | None = None) -> Trace:
    """Drive master and workers over the given transport until the stopping
    rule fires; broadcasts Shutdown on termination and returns the trace."""
    return transport.run(problem, cfg, f_star=f_star)
