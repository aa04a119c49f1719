"""Asynchronous master-worker consensus ADMM with rate certification."""

from .analysis import (
    CheckReport,
    KKTResiduals,
    PreconditionError,
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
from .problems import (
    ConsensusProblem,
    DimensionMismatch,
    LogisticObjective,
    PowerIterationError,
    QuadraticObjective,
    ReferenceSolution,
    Regularizer,
    SolveBudgetExceeded,
    estimate_lipschitz,
    local_gradient,
    objective_value,
    solve_reference,
)
from .protocol import (
    Broadcast,
    MasterLoop,
    MasterState,
    ProtocolConfig,
    ProtocolError,
    ProtocolInvariantError,
    Report,
    ScheduleError,
    Shutdown,
    StoppingRule,
    TransportError,
    WorkerState,
    barrier_ready,
    master_step,
    run_scheduled,
    run_to_completion,
    worker_step,
)
from .prox import (
    FistaConfig,
    SubproblemResult,
    dual_update,
    master_prox,
    project_box,
    soft_threshold,
    worker_subproblem,
)
from .simnet import Distribution, SimConfig, SimTransport, sim_run
from .tcpnet import TcpTransport, run_tcp_local, serve_master, worker_client
from .trace import ClockAccount, IterationRecord, Trace, read_trace_csv

__all__ = [name for name in dir() if not name.startswith("_")]
