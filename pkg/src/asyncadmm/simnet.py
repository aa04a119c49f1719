"""Deterministic event-driven cluster simulator.

Simulated time is the only clock: per-worker compute costs, link
latencies and the master's update cost are sampled from configured
distributions over independent per-actor substreams of one seed, so a
run is a pure function of (problem, configs, seed). Events are processed
in (time, sequence) order; sends are enumerated in ascending worker id;
per-link delivery times are clamped to be monotone so every link is FIFO
even under random latency.

Compute/wait accounting: every actor's compute + wait equals its own
final simulated time (the master ends at its stop decision, workers when
they read Shutdown).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .protocol import (
    Broadcast,
    MasterLoop,
    ProtocolConfig,
    ProtocolInvariantError,
    Report,
    Shutdown,
    WorkerState,
    worker_step,
)
from .trace import ClockAccount, Trace


@dataclass(frozen=True)
class Distribution:
    """Sampled positive durations: fixed value, uniform, or lognormal."""

    kind: str  # "fixed" | "uniform" | "lognormal"
    value: float = 0.0  # fixed
    lo: float = 0.0     # uniform
    hi: float = 0.0
    mu: float = 0.0     # lognormal (parameters of the underlying normal)
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform" and self.hi < self.lo:
            raise ValueError("uniform needs lo <= hi")
        if self.kind == "lognormal" and self.sigma < 0:
            raise ValueError("lognormal needs sigma >= 0")

    @classmethod
    def fixed(cls, value: float) -> "Distribution":
        return cls("fixed", value=float(value))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Distribution":
        return cls("uniform", lo=float(lo), hi=float(hi))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "Distribution":
        return cls("lognormal", mu=float(mu), sigma=float(sigma))

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        return float(rng.lognormal(self.mu, self.sigma))

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "Distribution":
        kind = d["kind"]
        if kind == "fixed":
            return cls.fixed(d["value"])
        if kind == "uniform":
            return cls.uniform(d["lo"], d["hi"])
        if kind == "lognormal":
            return cls.lognormal(d["mu"], d["sigma"])
        raise ValueError(f"unknown distribution kind {kind!r}")


@dataclass
class SimConfig:
    """Timing model: per-worker compute, per-message link latency, master cost."""

    seed: int = 0
    compute: Distribution | list = None
    latency: Distribution = None
    master_compute: Distribution = None

    def __post_init__(self):
        if self.compute is None:
            self.compute = Distribution.fixed(1.0)
        if self.latency is None:
            self.latency = Distribution.fixed(0.0)
        if self.master_compute is None:
            self.master_compute = Distribution.fixed(1e-3)

    def compute_for(self, N: int) -> list:
        dists = self.compute if isinstance(self.compute, list) else [self.compute] * N
        if len(dists) != N:
            raise ValueError(f"need {N} per-worker compute distributions, got {len(dists)}")
        for d in [*dists, self.master_compute]:
            # lognormal samples are strictly positive for any parameters
            if (d.kind == "fixed" and d.value <= 0) or (d.kind == "uniform" and d.lo <= 0):
                raise ValueError("compute times must be strictly positive")
        if ((self.latency.kind == "fixed" and self.latency.value < 0)
                or (self.latency.kind == "uniform" and self.latency.lo < 0)):
            raise ValueError("latencies must be nonnegative")
        return dists

    def to_dict(self) -> dict:
        comp = (self.compute if isinstance(self.compute, list) else [self.compute])
        return {"seed": self.seed,
                "compute": [d.to_dict() for d in comp],
                "latency": self.latency.to_dict(),
                "master_compute": self.master_compute.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        comp = [Distribution.from_dict(c) for c in d.get("compute", [])]
        if len(comp) == 1:
            comp = comp[0]
        return cls(seed=d.get("seed", 0), compute=comp or None,
                   latency=Distribution.from_dict(d["latency"]) if "latency" in d else None,
                   master_compute=(Distribution.from_dict(d["master_compute"])
                                   if "master_compute" in d else None))


# event kinds
_DELIVER_MASTER = 0
_DELIVER_WORKER = 1
_WORKER_DONE = 2
_MASTER_DONE = 3


@dataclass
class SimEvent:
    """Queue entry; total order is (time, sequence)."""

    time: float
    sequence: int
    kind: int
    data: tuple

    def __lt__(self, other):
        return (self.time, self.sequence) < (other.time, other.sequence)


class FifoLink:
    """Per-link delivery-time clamp: schedule times never go backwards, so
    delivery order equals send order even under random latency (ties are
    broken by the global sequence counter, which follows send order)."""

    __slots__ = ("last",)

    def __init__(self):
        self.last = 0.0

    def schedule(self, send_time: float, latency: float) -> float:
        if latency < 0:
            raise ValueError("latency must be nonnegative")
        when = max(send_time + latency, self.last)
        self.last = when
        return when


class _SimWorker:
    __slots__ = ("state", "busy", "alive", "anchor", "queued_shutdown",
                 "account", "idle_since", "broadcasts")

    def __init__(self, state: WorkerState):
        self.state = state
        self.busy = False
        self.alive = True
        self.anchor = None
        self.queued_shutdown = False
        self.account = ClockAccount()
        self.idle_since = 0.0
        self.broadcasts = 0


def sim_run(problem, cfg: ProtocolConfig, sim: SimConfig,
            f_star: float | None = None, meta: dict | None = None,
            store_history: bool = True) -> Trace:
    """Discrete-event execution of the full protocol; deterministic per seed."""
    N = problem.N
    compute_dists = sim.compute_for(N)
    ss = np.random.SeedSequence(sim.seed)
    children = ss.spawn(1 + 3 * N)
    rng_master = np.random.default_rng(children[0])
    rng_compute = [np.random.default_rng(children[1 + i]) for i in range(N)]
    rng_up = [np.random.default_rng(children[1 + N + i]) for i in range(N)]
    rng_down = [np.random.default_rng(children[1 + 2 * N + i]) for i in range(N)]

    loop = MasterLoop(problem, cfg, f_star,
                      meta={"backend": "sim", "seed": sim.seed, **(meta or {})},
                      store_history=store_history)
    workers = [_SimWorker(WorkerState(i, problem.locals[i])) for i in range(N)]
    master_acct = ClockAccount()
    master_busy = False
    master_idle_since = 0.0
    master_end: float | None = None
    link_up = [FifoLink() for _ in range(N)]    # worker -> master
    link_down = [FifoLink() for _ in range(N)]  # master -> worker

    q: list[SimEvent] = []
    seq = 0

    def push(time, kind, data):
        nonlocal seq
        heapq.heappush(q, SimEvent(time, seq, kind, data))
        seq += 1

    def send_down(i, msg, t):
        push(link_down[i].schedule(t, sim.latency.sample(rng_down[i])),
             _DELIVER_WORKER, (i, msg))

    def send_up(i, report, t):
        push(link_up[i].schedule(t, sim.latency.sample(rng_up[i])),
             _DELIVER_MASTER, (report,))

    def begin_master(t):
        nonlocal master_busy, master_idle_since
        master_acct.wait += t - master_idle_since
        mc = sim.master_compute.sample(rng_master)
        targets = loop.consume(now=t + mc, compute_cum=master_acct.compute + mc,
                               wait_cum=master_acct.wait)
        master_busy = True
        push(t + mc, _MASTER_DONE, (targets, mc))

    def finalize_worker(i, t):
        w = workers[i]
        w.account.wait += t - w.idle_since
        w.account.end = t
        w.alive = False

    # initial broadcast of the starting shared point to every worker
    x0_init = loop.state.x0
    for i in range(N):
        send_down(i, Broadcast(x0_init.copy(), 0), 0.0)

    last_time = 0.0
    while q:
        ev = heapq.heappop(q)
        if ev.time < last_time - 1e-12:
            raise ProtocolInvariantError(
                f"event queue produced non-monotone time {ev.time} < {last_time}")
        last_time = ev.time
        t = ev.time

        if ev.kind == _DELIVER_WORKER:
            i, msg = ev.data
            w = workers[i]
            if not w.alive:
                continue
            if isinstance(msg, Shutdown):
                if w.busy:
                    w.queued_shutdown = True
                else:
                    finalize_worker(i, t)
                continue
            if w.busy:
                raise ProtocolInvariantError(
                    f"worker {i} received a broadcast while computing")
            w.broadcasts += 1
            w.account.wait += t - w.idle_since
            w.busy = True
            w.anchor = msg.x0
            c = compute_dists[i].sample(rng_compute[i])
            if c <= 0:
                raise ProtocolInvariantError("sampled a nonpositive compute time")
            push(t + c, _WORKER_DONE, (i, c))

        elif ev.kind == _WORKER_DONE:
            i, c = ev.data
            w = workers[i]
            w.account.compute += c
            report = worker_step(w.state, w.anchor, cfg.rho, cfg.fista)
            send_up(i, report, t)
            w.busy = False
            w.idle_since = t
            if w.queued_shutdown:
                finalize_worker(i, t)

        elif ev.kind == _DELIVER_MASTER:
            (report,) = ev.data
            loop.offer(report, now=t)
            if not loop.finished and not master_busy and loop.ready():
                begin_master(t)

        elif ev.kind == _MASTER_DONE:
            targets, mc = ev.data
            master_acct.compute += mc
            master_busy = False
            master_idle_since = t
            if loop.finished:
                master_end = t
                for i in range(N):
                    if workers[i].alive:
                        send_down(i, Shutdown(), t)
            else:
                for i in targets:
                    send_down(i, Broadcast(loop.state.x0.copy(), loop.state.k), t)
                if loop.ready():
                    begin_master(t)

    if master_end is None:
        raise ProtocolInvariantError("simulation drained without a stop decision")
    master_acct.end = master_end
    clock = {"master": master_acct}
    for i, w in enumerate(workers):
        if w.alive:
            raise ProtocolInvariantError(f"worker {i} never received Shutdown")
        clock[f"worker_{i}"] = w.account
    loop.trace.meta["broadcasts_received"] = [w.broadcasts for w in workers]
    return loop.finish(clock)


class SimTransport:
    """Transport adapter over sim_run for run_to_completion."""

    def __init__(self, sim: SimConfig, store_history: bool = True):
        self.sim = sim
        self.store_history = store_history

    def run(self, problem, cfg: ProtocolConfig, f_star=None, meta=None) -> Trace:
        return sim_run(problem, cfg, self.sim, f_star=f_star, meta=meta,
                       store_history=self.store_history)
