"""``ddf-bench``: run, scale, predict and calibrate from the command line.

When ``DDF_RANK``/``DDF_WORLD``/``DDF_COORD`` are set, ``run`` acts as one
socket worker of an externally launched world and rank 0 writes the report.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile

from ..comm.launch import context_from_env, env_world
from ..costmodel import CostParams, LocalOpKind, Pattern, pattern_cost
from .runner import (OPS, BenchConfig, CalibrationResult, calibrate, predict_vs_measured,
                     run_benchmark, run_env_worker, scaling_suite)


def _emit(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, default=str)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _workers(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_run_args(p: argparse.ArgumentParser, workers_list: bool = False) -> None:
    p.add_argument("--op", choices=OPS, default="join")
    p.add_argument("--rows", type=int, default=1_000_000, help="total rows (per worker with --per-worker)")
    p.add_argument("--per-worker", action="store_true", help="interpret --rows per worker")
    if workers_list:
        p.add_argument("--workers", type=_workers, default=[1, 2, 4, 8], help="comma-separated P list")
    else:
        p.add_argument("--workers", type=int, default=4)
    p.add_argument("--cardinality", type=float, default=0.9)
    p.add_argument("--transport", choices=("local", "tcp"), default="local")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default=None)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--exclusive-compute", choices=("auto", "on", "off"), default="auto",
                   help="serialise compute stages across workers (auto: when P exceeds cores)")
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--json", dest="out", default=None, help="write the JSON report here")


def _config(a: argparse.Namespace, workers: int, rows_per_worker: bool | None = None) -> BenchConfig:
    excl = {"auto": None, "on": True, "off": False}[a.exclusive_compute]
    return BenchConfig(op=a.op, rows=a.rows, workers=workers, cardinality=a.cardinality,
                       transport=a.transport, seed=a.seed, strategy=a.strategy, reps=a.reps,
                       rows_per_worker=a.per_worker if rows_per_worker is None else rows_per_worker,
                       window=a.window, exclusive_compute=excl, timeout=a.timeout, out=a.out)


def cmd_run(a: argparse.Namespace) -> int:
    world = env_world()
    if world is not None:
        rank, P = world
        cfg = _config(a, P)
        ctx = context_from_env(a.timeout)
        try:
            report = run_env_worker(ctx, cfg, a.scratch or tempfile.gettempdir())
        finally:
            ctx.close()
        if report is not None:
            _emit(report.to_dict(), a.out)
        return 0
    _emit(run_benchmark(_config(a, a.workers)).to_dict(), a.out)
    return 0


def cmd_scaling(a: argparse.Namespace) -> int:
    cfg = _config(a, max(1, min(a.workers)), rows_per_worker=(a.kind == "weak"))
    _emit(scaling_suite(a.kind, cfg, a.workers).to_dict(), a.out)
    return 0


def cmd_predict(a: argparse.Namespace) -> int:
    params = CostParams(alpha=a.alpha, beta=a.beta, gamma=a.gamma, kappa=a.kappa, P=a.workers, N=a.rows,
                        c=a.columns, row_bytes=a.row_bytes, C=a.cardinality)
    if a.measure:
        cfg = BenchConfig(op=a.op, rows=int(a.rows), workers=a.workers, cardinality=a.cardinality or 0.9,
                          strategy=a.strategy, reps=a.reps, transport=a.transport)
        calib = CalibrationResult(a.alpha, a.beta, a.kappa, 0.0, 0.0)
        _emit(predict_vs_measured(cfg, calib), a.out)
        return 0
    extra = {"window": a.window} if a.pattern == Pattern.HALO_EXCHANGE.value else {}
    b = pattern_cost(Pattern(a.pattern), params, LocalOpKind(a.core), **extra)
    args = {k: v for k, v in vars(a).items() if k != "func"}
    _emit({"params": args, "breakdown": b.to_dict(), "total": b.total}, a.out)
    return 0


def cmd_calibrate(a: argparse.Namespace) -> int:
    _emit(calibrate(a.transport, reps=a.reps).to_dict(), a.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddf-bench", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="time one operator")
    _add_run_args(p)
    p.add_argument("--scratch", default=None, help="shared directory for the csv op in socket-worker mode")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("scaling", help="strong or weak scaling suite")
    p.add_argument("--kind", choices=("strong", "weak"), required=True)
    _add_run_args(p, workers_list=True)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("predict", help="cost-model breakdown (optionally against a measured run)")
    p.add_argument("--alpha", type=float, default=1e-6)
    p.add_argument("--beta", type=float, default=1e-9)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--kappa", type=float, default=1e-8)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--rows", type=float, default=1e6)
    p.add_argument("--columns", type=int, default=2)
    p.add_argument("--row-bytes", type=float, default=16.0)
    p.add_argument("--cardinality", type=float, default=None)
    p.add_argument("--pattern", choices=[x.value for x in Pattern], default=Pattern.SHUFFLE_COMPUTE_HASH.value)
    p.add_argument("--core", choices=[x.value for x in LocalOpKind], default=LocalOpKind.HASH_JOIN.value)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--measure", action="store_true", help="also run --op and compare")
    p.add_argument("--op", choices=OPS, default="join")
    p.add_argument("--strategy", default=None)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--transport", choices=("local", "tcp"), default="local")
    p.add_argument("--json", dest="out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="fit alpha/beta by ping-pong and kappa by local sorts")
    p.add_argument("--transport", choices=("local", "tcp"), default="tcp")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--json", dest="out", default=None)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, RuntimeError) as e:
        print(f"ddf-bench: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
