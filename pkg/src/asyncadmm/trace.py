"""Run telemetry: full iterate history, arrival bookkeeping, clock accounts.

A Trace stores the master-view history of a run: the shared variable
x0^k, the master's per-worker cached primal/dual copies, the arrival set
consumed at every iteration, delay-counter snapshots, the augmented
Lagrangian and objective values, and per-actor compute/wait accounting.
Every inequality validator is a pure function of this object.

Index conventions: iteration k consumes arrival set ``arrivals[k]`` and
produces state k+1, so a trace with K master iterations holds K+1
states. A worker's "arrival before k" is -1 when it has not arrived yet;
the broadcast behind a first report is x0^0 (index -1 + 1).
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClockAccount:
    """Per-actor simulated (or wall) seconds, split into compute and wait.

    ``compute + wait == end`` exactly: each actor is accounted from time 0
    to the instant it stops (the master at its stop decision, a worker
    when it reads Shutdown).
    """

    compute: float = 0.0
    wait: float = 0.0
    end: float = 0.0

    def to_dict(self) -> dict:
        return {"compute": self.compute, "wait": self.wait, "end": self.end}

    @classmethod
    def from_dict(cls, d: dict) -> "ClockAccount":
        return cls(d["compute"], d["wait"], d["end"])


@dataclass
class IterationRecord:
    """One telemetry row (the CSV schema, in column order)."""

    k: int
    objective: float
    delta: float          # augmented-Lagrangian gap; nan when f_star unknown
    consensus_err: float  # sum_i ||x_i^k - x0^k||^2
    arrivals: int         # |A_{k-1}| (0 for the initial row)
    time: float           # simulated (sim backend) or wall (tcp) seconds
    master_compute: float
    master_wait: float


CSV_COLUMNS = ("k", "objective", "delta", "consensus_err", "arrivals",
               "time", "master_compute", "master_wait")


class Trace:
    def __init__(self, n: int, N: int, rho: float, gamma: float, tau: int,
                 a_min: int, f_star: float | None = None, meta: dict | None = None,
                 store_history: bool = True):
        self.n = n
        self.N = N
        self.rho = rho
        self.gamma = gamma
        self.tau = tau
        self.a_min = a_min
        self.f_star = f_star
        self.meta = dict(meta or {})
        self.store_history = store_history
        self.x0_hist: list[np.ndarray] = []
        self.x_hist: list[np.ndarray] = []    # (N, n) master caches; latest only when store_history is off
        self.lam_hist: list[np.ndarray] = []
        self.arrivals: list[tuple[int, ...]] = []
        self.d_tops: list[np.ndarray] = []    # delay counters at the top of each iteration
        self.lagrangian: list[float] = []
        self.objective: list[float] = []
        self.consensus: list[float] = []      # sum_i ||x_i^k - x0^k||^2 per state
        self.times: list[float] = []
        self.master_compute: list[float] = []
        self.master_wait: list[float] = []
        self.clock: dict[str, ClockAccount] = {}
        self.discarded_reports: list[tuple[int, int, float]] = []  # (worker, k_i, time)
        self.nonconverged_reports: int = 0
        self._arrivals_by_worker: list[list[int]] | None = None

    # -- construction -----------------------------------------------------

    def append_state(self, x0, x_cache, lam_cache, lagrangian, objective,
                     time=0.0, master_compute=0.0, master_wait=0.0):
        x0 = np.array(x0, dtype=float)
        x_cache = np.array(x_cache, dtype=float)
        lam_cache = np.array(lam_cache, dtype=float)
        self.x0_hist.append(x0)
        if self.store_history:
            self.x_hist.append(x_cache)
            self.lam_hist.append(lam_cache)
        else:
            self.x_hist = [x_cache]
            self.lam_hist = [lam_cache]
        self.lagrangian.append(float(lagrangian))
        self.objective.append(float(objective))
        self.consensus.append(float(np.sum((x_cache - x0) ** 2)))
        self.times.append(float(time))
        self.master_compute.append(float(master_compute))
        self.master_wait.append(float(master_wait))

    def append_iteration(self, arrivals, d_top):
        self.arrivals.append(tuple(sorted(int(i) for i in arrivals)))
        self.d_tops.append(np.array(d_top, dtype=int))
        self._arrivals_by_worker = None

    # -- accessors ---------------------------------------------------------

    @property
    def iterations(self) -> int:
        return len(self.arrivals)

    def x0(self, k: int) -> np.ndarray:
        return self.x0_hist[k]

    def _hist(self, hist: list, k: int) -> np.ndarray:
        if self.store_history:
            return hist[k]
        if k == self.iterations:
            return hist[-1]
        raise ValueError("trace was recorded without cache history "
                         "(store_history=False); only the final state is kept")

    def x_cache(self, k: int) -> np.ndarray:
        return self._hist(self.x_hist, k)

    def lam_cache(self, k: int) -> np.ndarray:
        return self._hist(self.lam_hist, k)

    def delta(self, k: int) -> float:
        if self.f_star is None:
            return math.nan
        return self.lagrangian[k] - self.f_star

    def consensus_err(self, k: int) -> float:
        return self.consensus[k]

    def arrivals_of(self, i: int) -> list[int]:
        if self._arrivals_by_worker is None:
            by_worker = [[] for _ in range(self.N)]
            for k, ak in enumerate(self.arrivals):
                for j in ak:
                    by_worker[j].append(k)
            self._arrivals_by_worker = by_worker
        return self._arrivals_by_worker[i]

    def last_arrival_before(self, i: int, k: int) -> int:
        """Largest iteration index < k with i in its arrival set, else -1."""
        arr = self.arrivals_of(i)
        idx = bisect.bisect_left(arr, k)
        return arr[idx - 1] if idx > 0 else -1

    def kbar(self, i: int, k: int) -> int:
        """Previous arrival of i before iteration k (for i in A_k)."""
        return self.last_arrival_before(i, k)

    def ktilde(self, i: int, k: int) -> int:
        """Most recent arrival of i before iteration k (for i not in A_k)."""
        return self.last_arrival_before(i, k)

    def khat(self, i: int, k: int) -> int:
        """Arrival of i before its most recent arrival before k; -1 at the start."""
        kt = self.last_arrival_before(i, k)
        return self.last_arrival_before(i, kt) if kt >= 0 else -1

    # -- invariant helpers ---------------------------------------------------

    def bounded_delay_violations(self, tau: int | None = None) -> list[tuple[int, int]]:
        """(k, i) pairs where worker i fell out of the tau-wide arrival window.

        Initialization counts as an arrival at iteration -1 (the master
        starts with fresh copies of every worker's variables).
        """
        tau = self.tau if tau is None else tau
        bad = []
        for k in range(self.iterations):
            for i in range(self.N):
                if i in self.arrivals[k]:
                    continue
                if self.last_arrival_before(i, k + 1) < k - tau + 1:
                    bad.append((k, i))
        return bad

    def d_recursion_violations(self) -> list[tuple[int, int]]:
        """(k, i) where the stored counter differs from k-1-last_arrival, floored at 0."""
        bad = []
        for k in range(self.iterations):
            for i in range(self.N):
                expected = max(k - 1 - self.last_arrival_before(i, k), 0)
                if int(self.d_tops[k][i]) != expected:
                    bad.append((k, i))
        return bad

    def stale_copy_violations(self, atol: float = 0.0) -> list[tuple[int, int]]:
        """(k, i) where an unarrived worker's cache differs from its last report."""
        if not self.store_history:
            raise ValueError("needs a trace recorded with store_history=True")
        bad = []
        for k in range(self.iterations):
            for i in range(self.N):
                if i in self.arrivals[k]:
                    continue
                kt = self.ktilde(i, k)
                ref = self.x_hist[kt + 1][i] if kt >= 0 else self.x_hist[0][i]
                if not np.allclose(self.x_hist[k][i], ref, rtol=0.0, atol=atol):
                    bad.append((k, i))
        return bad

    # -- serialization -------------------------------------------------------

    def records(self):
        for k in range(len(self.x0_hist)):
            yield IterationRecord(
                k=k,
                objective=self.objective[k],
                delta=self.delta(k),
                consensus_err=self.consensus_err(k),
                arrivals=len(self.arrivals[k - 1]) if k > 0 else 0,
                time=self.times[k],
                master_compute=self.master_compute[k],
                master_wait=self.master_wait[k],
            )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records():
            w.writerow([r.k, repr(r.objective), repr(r.delta),
                        repr(r.consensus_err), r.arrivals, repr(r.time),
                        repr(r.master_compute), repr(r.master_wait)])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def save_npz(self, path):
        flat = [i for ak in self.arrivals for i in ak]
        ptr = np.zeros(len(self.arrivals) + 1, dtype=np.int64)
        for k, ak in enumerate(self.arrivals):
            ptr[k + 1] = ptr[k] + len(ak)
        header = {
            "n": self.n, "N": self.N, "rho": self.rho, "gamma": self.gamma,
            "tau": self.tau, "a_min": self.a_min,
            "f_star": self.f_star, "meta": self.meta,
            "store_history": self.store_history,
            "clock": {a: c.to_dict() for a, c in self.clock.items()},
            "discarded_reports": self.discarded_reports,
            "nonconverged_reports": self.nonconverged_reports,
        }
        np.savez(
            path,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            x0=np.stack(self.x0_hist),
            x=np.stack(self.x_hist),
            lam=np.stack(self.lam_hist),
            arrivals_flat=np.array(flat, dtype=np.int64),
            arrivals_ptr=ptr,
            d_tops=(np.stack(self.d_tops) if self.d_tops
                    else np.zeros((0, self.N), dtype=int)),
            lagrangian=np.array(self.lagrangian),
            objective=np.array(self.objective),
            consensus=np.array(self.consensus),
            times=np.array(self.times),
            master_compute=np.array(self.master_compute),
            master_wait=np.array(self.master_wait),
        )

    @classmethod
    def load_npz(cls, path) -> "Trace":
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            t = cls(header["n"], header["N"], header["rho"], header["gamma"],
                    header["tau"], header["a_min"], f_star=header["f_star"],
                    meta=header["meta"],
                    store_history=header.get("store_history", True))
            t.x0_hist = [row for row in z["x0"]]
            t.x_hist = [row for row in z["x"]]
            t.lam_hist = [row for row in z["lam"]]
            flat, ptr = z["arrivals_flat"], z["arrivals_ptr"]
            t.arrivals = [tuple(int(i) for i in flat[ptr[k]:ptr[k + 1]])
                          for k in range(len(ptr) - 1)]
            t.d_tops = [row for row in z["d_tops"]]
            t.lagrangian = [float(v) for v in z["lagrangian"]]
            t.objective = [float(v) for v in z["objective"]]
            t.consensus = [float(v) for v in z["consensus"]]
            t.times = [float(v) for v in z["times"]]
            t.master_compute = [float(v) for v in z["master_compute"]]
            t.master_wait = [float(v) for v in z["master_wait"]]
            t.clock = {a: ClockAccount.from_dict(c)
                       for a, c in header["clock"].items()}
            t.discarded_reports = [tuple(r) for r in header["discarded_reports"]]
            t.nonconverged_reports = header["nonconverged_reports"]
        return t


def read_trace_csv(path) -> list[IterationRecord]:
    """Parse a telemetry CSV back into records (round-trip of write_csv)."""
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected trace CSV header {header}")
        for row in rd:
            out.append(IterationRecord(
                k=int(row[0]), objective=float(row[1]), delta=float(row[2]),
                consensus_err=float(row[3]), arrivals=int(row[4]),
                time=float(row[5]), master_compute=float(row[6]),
                master_wait=float(row[7])))
    return out
