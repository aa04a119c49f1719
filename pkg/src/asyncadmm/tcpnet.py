"""Framed TCP transport for real multi-process runs.

Wire format (bit-exact, little-endian throughout):

    frame   := u32 payload_length || payload || u32 crc
    payload := u8 kind || u32 sender_id || u64 tag || f64 vector data
    crc     := CRC32C (Castagnoli) over exactly the payload bytes

Kinds: 1 broadcast (one vector: the shared point; tag = master
iteration), 2 report (two equal-length vectors: primal then dual; tag =
worker clock), 3 shutdown (no vectors), 4 register (no vectors; sender =
claimed worker id), 5 error (no vectors; tag = error code, 1 = duplicate
id, 2 = invalid id). The master accepts exactly N unique registrations
before broadcasting the initial shared point; per-connection FIFO comes
from TCP itself. One reader thread per connection feeds a single master
logic thread through an ordered mailbox; workers are single-threaded
request-response loops.

Clock accounts on this backend are wall-clock seconds and cover the
master only (workers run in their own processes or threads). A report's
non-convergence flag has no room in the frame; the worker logs it to
stderr before sending.
"""

from __future__ import annotations

import queue
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from .protocol import (
    MasterLoop,
    ProtocolConfig,
    Report,
    TransportError,
    WorkerState,
    worker_step,
)
from .prox import FistaConfig
from .trace import ClockAccount, Trace

KIND_BROADCAST = 1
KIND_REPORT = 2
KIND_SHUTDOWN = 3
KIND_REGISTER = 4
KIND_ERROR = 5

ERR_DUPLICATE_ID = 1
ERR_INVALID_ID = 2

_HEADER = struct.Struct("<BIQ")


class FrameError(RuntimeError):
    """Malformed frame, checksum mismatch, or mid-frame connection loss."""


def _make_crc32c_table():
    poly = 0x82F63B78
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _make_crc32c_table()


def crc32c(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


@dataclass
class Frame:
    kind: int
    sender: int
    tag: int
    vectors: list


def encode_frame(kind: int, sender: int, tag: int, vectors=()) -> bytes:
    payload = _HEADER.pack(kind, sender, tag) + b"".join(
        np.ascontiguousarray(v, dtype="<f8").tobytes() for v in vectors)
    return struct.pack("<I", len(payload)) + payload + struct.pack("<I", crc32c(payload))


def decode_payload(payload: bytes) -> Frame:
    if len(payload) < _HEADER.size:
        raise FrameError(f"payload too short ({len(payload)} bytes)")
    kind, sender, tag = _HEADER.unpack_from(payload)
    body = payload[_HEADER.size:]
    if kind == KIND_BROADCAST:
        if len(body) % 8:
            raise FrameError("broadcast body is not a whole f64 vector")
        vectors = [np.frombuffer(body, dtype="<f8").copy()]
    elif kind == KIND_REPORT:
        if len(body) % 16:
            raise FrameError("report body is not two equal f64 vectors")
        half = len(body) // 2
        vectors = [np.frombuffer(body[:half], dtype="<f8").copy(),
                   np.frombuffer(body[half:], dtype="<f8").copy()]
    elif kind in (KIND_SHUTDOWN, KIND_REGISTER, KIND_ERROR):
        if body:
            raise FrameError(f"kind {kind} carries no vectors")
        vectors = []
    else:
        raise FrameError(f"unknown frame kind {kind}")
    return Frame(kind, sender, tag, vectors)


def _recv_exact(sock, nbytes: int, allow_eof: bool) -> bytes | None:
    chunks = []
    got = 0
    while got < nbytes:
        data = sock.recv(nbytes - got)
        if not data:
            if allow_eof and got == 0:
                return None
            raise FrameError("connection closed mid-frame")
        chunks.append(data)
        got += len(data)
    return b"".join(chunks)


def read_frame(sock) -> Frame | None:
    """Read one frame; None on a clean EOF at a frame boundary."""
    head = _recv_exact(sock, 4, allow_eof=True)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    payload = _recv_exact(sock, length, allow_eof=False)
    (crc,) = struct.unpack("<I", _recv_exact(sock, 4, allow_eof=False))
    if crc32c(payload) != crc:
        raise FrameError("frame checksum mismatch")
    return decode_payload(payload)


def write_frame(sock, kind: int, sender: int, tag: int, vectors=()):
    sock.sendall(encode_frame(kind, sender, tag, vectors))


def _configure(sock):
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


# ---------------------------------------------------------------------------
# master endpoint


def serve_master(problem, cfg: ProtocolConfig, bind=("127.0.0.1", 0),
                 f_star: float | None = None, ready_cb=None,
                 meta: dict | None = None, register_timeout: float = 60.0,
                 store_history: bool = True) -> Trace:
    """Accept N worker registrations, run the protocol, return the trace.

    ``ready_cb`` (if given) receives the bound (host, port) once the
    listener is up, before any registration is read. Connection loss
    mid-run raises TransportError carrying the partial trace.
    """
    N = problem.N
    listener = socket.create_server(bind)
    try:
        if ready_cb is not None:
            ready_cb(listener.getsockname())
        conns: dict[int, socket.socket] = {}
        while len(conns) < N:
            conn, _ = listener.accept()
            _configure(conn)
            conn.settimeout(register_timeout)
            try:
                frame = read_frame(conn)
            except FrameError:
                conn.close()
                continue
            if frame is None or frame.kind != KIND_REGISTER:
                conn.close()
                continue
            wid = frame.sender
            if not (0 <= wid < N):
                write_frame(conn, KIND_ERROR, wid, ERR_INVALID_ID)
                conn.close()
                continue
            if wid in conns:
                write_frame(conn, KIND_ERROR, wid, ERR_DUPLICATE_ID)
                conn.close()
                continue
            conn.settimeout(None)
            conns[wid] = conn
    finally:
        listener.close()

    mailbox: queue.Queue = queue.Queue()
    t0 = time.perf_counter()

    def reader(wid: int, conn):
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    mailbox.put(("closed", wid, None))
                    return
                if frame.kind != KIND_REPORT:
                    mailbox.put(("protocol", wid,
                                 f"unexpected frame kind {frame.kind} from worker"))
                    return
                rep = Report(frame.sender, frame.vectors[0], frame.vectors[1],
                             frame.tag)
                mailbox.put(("report", wid, rep))
        except (FrameError, OSError) as exc:
            mailbox.put(("error", wid, str(exc)))

    threads = [threading.Thread(target=reader, args=(wid, conn), daemon=True)
               for wid, conn in sorted(conns.items())]
    for th in threads:
        th.start()

    loop = MasterLoop(problem, cfg, f_star, meta={"backend": "tcp", **(meta or {})},
                      store_history=store_history)
    acct = ClockAccount()
    try:
        for wid in sorted(conns):
            write_frame(conns[wid], KIND_BROADCAST, 0, 0, [loop.state.x0])
        while not loop.finished:
            wait_start = time.perf_counter()
            kind, wid, payload = mailbox.get()
            acct.wait += time.perf_counter() - wait_start
            if kind != "report":
                raise TransportError(
                    f"worker {wid} connection failed mid-run: {payload}",
                    partial_trace=loop.finish({"master": acct}))
            loop.offer(payload, now=time.perf_counter() - t0)
            while True:  # batch whatever already arrived
                try:
                    kind, wid, payload = mailbox.get_nowait()
                except queue.Empty:
                    break
                if kind != "report":
                    raise TransportError(
                        f"worker {wid} connection failed mid-run: {payload}",
                        partial_trace=loop.finish({"master": acct}))
                loop.offer(payload, now=time.perf_counter() - t0)
            while not loop.finished and loop.ready():
                c0 = time.perf_counter()
                targets = loop.consume(now=c0 - t0, compute_cum=acct.compute,
                                       wait_cum=acct.wait)
                acct.compute += time.perf_counter() - c0
                if not loop.finished:
                    for i in targets:
                        write_frame(conns[i], KIND_BROADCAST, 0, loop.state.k,
                                    [loop.state.x0])
        acct.end = time.perf_counter() - t0
        for wid in sorted(conns):
            try:
                write_frame(conns[wid], KIND_SHUTDOWN, 0, 0)
            except OSError:
                pass
        # drain stragglers so late reports are logged, then let readers finish
        deadline = time.time() + 10.0
        for th in threads:
            th.join(timeout=max(0.0, deadline - time.time()))
        while True:
            try:
                kind, wid, payload = mailbox.get_nowait()
            except queue.Empty:
                break
            if kind == "report":
                loop.offer(payload, now=time.perf_counter() - t0)
    finally:
        for conn in conns.values():
            try:
                conn.close()
            except OSError:
                pass
    return loop.finish({"master": acct})


# ---------------------------------------------------------------------------
# worker endpoint


def worker_client(address, worker_id: int, obj, rho: float,
                  fista: FistaConfig | None = None) -> int:
    """Single-threaded worker loop: register, then solve/report per broadcast.

    Exit status: 0 on Shutdown, 2 if the master rejected the
    registration with an error frame, 1 on connection loss.
    """
    sock = socket.create_connection(address)
    _configure(sock)
    try:
        write_frame(sock, KIND_REGISTER, worker_id, 0)
        w = WorkerState(worker_id, obj)
        while True:
            frame = read_frame(sock)
            if frame is None:
                return 1
            if frame.kind == KIND_SHUTDOWN:
                return 0
            if frame.kind == KIND_ERROR:
                print(f"worker {worker_id}: rejected by master (code {frame.tag})",
                      file=sys.stderr)
                return 2
            if frame.kind != KIND_BROADCAST:
                raise FrameError(f"unexpected frame kind {frame.kind} from master")
            rep = worker_step(w, frame.vectors[0], rho, fista)
            if not rep.converged:
                print(f"worker {worker_id}: subproblem hit max_inner at clock "
                      f"{rep.k_i}", file=sys.stderr)
            write_frame(sock, KIND_REPORT, worker_id, rep.k_i, [rep.x, rep.lam])
    finally:
        sock.close()


def run_tcp_local(problem, cfg: ProtocolConfig, f_star: float | None = None,
                  host: str = "127.0.0.1", port: int = 0,
                  meta: dict | None = None, store_history: bool = True) -> Trace:
    """Loopback run: master plus N in-thread workers over real sockets."""
    addr_q: queue.Queue = queue.Queue()
    result: dict = {}

    def master_main():
        try:
            result["trace"] = serve_master(problem, cfg, (host, port),
                                           f_star=f_star, ready_cb=addr_q.put,
                                           meta=meta, store_history=store_history)
        except BaseException as exc:  # surfaced in the caller
            result["error"] = exc

    mt = threading.Thread(target=master_main, daemon=True)
    mt.start()
    addr = addr_q.get(timeout=30.0)
    statuses = [None] * problem.N

    def worker_main(i):
        statuses[i] = worker_client(addr, i, problem.locals[i], cfg.rho, cfg.fista)

    wts = [threading.Thread(target=worker_main, args=(i,), daemon=True)
           for i in range(problem.N)]
    for th in wts:
        th.start()
    mt.join(timeout=600.0)
    for th in wts:
        th.join(timeout=30.0)
    if "error" in result:
        raise result["error"]
    if mt.is_alive():
        raise TransportError("master did not terminate")
    bad = [i for i, s in enumerate(statuses) if s != 0]
    if bad:
        raise TransportError(f"workers {bad} exited with statuses "
                             f"{[statuses[i] for i in bad]}",
                             partial_trace=result.get("trace"))
    return result["trace"]


class TcpTransport:
    """Loopback transport adapter for run_to_completion."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 store_history: bool = True):
        self.host = host
        self.port = port
        self.store_history = store_history

    def run(self, problem, cfg: ProtocolConfig, f_star=None, meta=None) -> Trace:
        return run_tcp_local(problem, cfg, f_star=f_star, host=self.host,
                             port=self.port, meta=meta,
                             store_history=self.store_history)
