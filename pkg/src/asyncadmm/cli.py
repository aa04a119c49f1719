"""Command-line interface: run, certify, check, sync-oracle, gen-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    RateCertificate,
    certify,
    check_consensus_bound,
    check_descent_lemma,
    check_envelope,
    check_gamma0_bound,
    check_weighted_delay_bound,
)
from .data import make_logistic_data, write_libsvm
from .experiment import ExperimentConfig, build_problem, run_experiment, sync_reference
from .tcpnet import serve_master, worker_client
from .trace import Trace


def _add_run(sub):
    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backend", choices=["sim", "tcp"], default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--a-min", type=int, default=None)
    p.add_argument("--role", choices=["auto", "master", "worker"], default="auto",
                   help="tcp only: auto spawns local workers; master/worker join "
                        "a multi-process run")
    p.add_argument("--worker-id", type=int, default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.backend is not None:
        cfg.backend = args.backend
    if args.rho is not None:
        cfg.protocol.rho = args.rho
    if args.gamma is not None:
        cfg.protocol.gamma = args.gamma
    if args.tau is not None:
        cfg.protocol.tau = args.tau
    if args.a_min is not None:
        cfg.protocol.a_min = args.a_min
    if args.host is not None:
        cfg.tcp_host = args.host
    if args.port is not None:
        cfg.tcp_port = args.port
    return cfg


def _cmd_run(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    if args.role == "worker":
        if args.worker_id is None:
            print("--role worker needs --worker-id", file=sys.stderr)
            return 2
        problem = build_problem(cfg.problem, cfg.seed)
        return worker_client((cfg.tcp_host, cfg.tcp_port or 7061), args.worker_id,
                             problem.locals[args.worker_id], cfg.protocol.rho,
                             cfg.protocol.fista)
    if args.role == "master":
        problem = build_problem(cfg.problem, cfg.seed)
        out = Path(args.out_dir or cfg.out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        trace = serve_master(problem, cfg.protocol,
                             (cfg.tcp_host, cfg.tcp_port or 7061),
                             ready_cb=lambda a: print(f"listening on {a[0]}:{a[1]}"))
        trace.write_csv(out / "trace.csv")
        trace.save_npz(out / "trace.npz")
        print(f"stop={trace.meta.get('stop_reason')} "
              f"objective={trace.objective[-1]!r}")
        return 0
    result = run_experiment(cfg, out_dir=args.out_dir)
    print(f"stop={result.stop_reason} iterations={result.iterations} "
          f"objective={result.final_objective!r} f_star={result.f_star!r}")
    for r in result.reports:
        print(f"check {r.name}: {'pass' if r.passed else 'FAIL'} "
              f"({len(r.violations)} violations)")
    return 0 if result.ok else 1


def _add_certify(sub):
    p = sub.add_parser("certify", help="compute linear-rate parameter thresholds")
    p.add_argument("--lipschitz", "-L", type=float, required=True, dest="L")
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--workers", "-N", type=int, required=True, dest="N")
    p.add_argument("--arrival-bound", "-S", type=int, required=True, dest="S")
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--hoffman-c", type=float, default=None)
    p.add_argument("--gamma-floor", type=float, default=None)
    p.add_argument("--out", default=None)


def _cmd_certify(args) -> int:
    cert = certify(args.L, args.sigma2, args.N, args.S, args.tau,
                   gamma_floor=args.gamma_floor, c=args.hoffman_c)
    text = cert.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _add_check(sub):
    p = sub.add_parser("check", help="replay inequality validators over a saved trace")
    p.add_argument("--trace", required=True, help="trace.npz from a run")
    p.add_argument("--checks", required=True,
                   help="comma list: descent,consensus,envelope,gamma0,"
                        "delay:arrivals,delay:complement")
    p.add_argument("--cert", default=None, help="certificate.json (for envelope/delay)")
    p.add_argument("--slack", type=float, default=1e-9)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--nu", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--hoffman-c", type=float, default=None)
    p.add_argument("--out", default=None)


def _cmd_check(args) -> int:
    trace = Trace.load_npz(args.trace)
    cert = None
    if args.cert:
        cert = RateCertificate.from_dict(json.loads(Path(args.cert).read_text()))
    reports = []
    for name in args.checks.split(","):
        name = name.strip()
        if name == "descent":
            reports.append(check_descent_lemma(trace, slack=args.slack))
        elif name == "consensus":
            reports.append(check_consensus_bound(trace, slack=args.slack))
        elif name == "envelope":
            if cert is None:
                print("envelope check needs --cert", file=sys.stderr)
                return 2
            reports.append(check_envelope(trace, cert, slack=args.slack))
        elif name == "gamma0":
            if args.delta is None:
                print("gamma0 check needs --delta", file=sys.stderr)
                return 2
            reports.append(check_gamma0_bound(trace, args.delta,
                                              c=args.hoffman_c, slack=args.slack))
        elif name.startswith("delay"):
            subset = name.split(":", 1)[1] if ":" in name else "arrivals"
            eta = args.eta if args.eta is not None else (cert.eta if cert else None)
            if eta is None:
                print("delay check needs --eta or --cert", file=sys.stderr)
                return 2
            nu = args.nu
            if nu is None:
                nu = trace.tau if subset == "arrivals" else 2 * trace.tau - 1
            reports.append(check_weighted_delay_bound(trace, eta, nu, subset,
                                                      slack=args.slack))
        else:
            print(f"unknown check {name!r}", file=sys.stderr)
            return 2
    payload = json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    for r in reports:
        print(f"{r.name}: {'pass' if r.passed else 'FAIL'} "
              f"({len(r.violations)} violations, {len(r.burn_in)} burn-in)",
              file=sys.stderr)
    return 0 if all(r.passed for r in reports) else 1


def _add_sync_oracle(sub):
    p = sub.add_parser("sync-oracle",
                       help="run the standalone synchronous recursion on a config's problem")
    p.add_argument("--config", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--npz", default=None, help="optionally save full history too")


def _cmd_sync_oracle(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    problem = build_problem(cfg.problem, cfg.seed)
    trace = sync_reference(problem, cfg.protocol.rho, args.iters)
    trace.write_csv(args.out)
    if args.npz:
        trace.save_npz(args.npz)
    print(f"objective={trace.objective[-1]!r} consensus_err={trace.consensus_err(trace.iterations)!r}")
    return 0


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="write a synthetic LIBSVM dataset")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.25)
    p.add_argument("--out", required=True)


def _cmd_gen_data(args) -> int:
    X, y = make_logistic_data(args.m, args.n, args.seed, args.scale)
    write_libsvm(args.out, X, y)
    print(f"wrote {args.m} samples x {args.n} features to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="asyncadmm",
        description="Asynchronous consensus ADMM: runs, rate certificates, "
                    "trace validation")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_certify(sub)
    _add_check(sub)
    _add_sync_oracle(sub)
    _add_gen_data(sub)
    args = parser.parse_args(argv)
    handlers = {"run": _cmd_run, "certify": _cmd_certify, "check": _cmd_check,
                "sync-oracle": _cmd_sync_oracle, "gen-data": _cmd_gen_data}
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
