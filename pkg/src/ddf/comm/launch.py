"""Spawn a world of P workers and collect each rank's return value."""
from __future__ import annotations

import multiprocessing as mp
import os
import queue
import socket
import threading
import traceback
from typing import Any, Callable

from .context import WorkerContext
from .transport import DEFAULT_TIMEOUT, LocalWorld, TcpTransport, TransportError


ERROR_GRACE = 2.0


class WorkerFailure(RuntimeError):
    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank}: {message}")
        self.rank = rank


def _pick_error(errors: dict[int, BaseException]) -> BaseException:
    # prefer the root cause over peers that merely saw the world abort
    primary = {r: e for r, e in errors.items() if not isinstance(e, TransportError)}
    pool = primary or errors
    return pool[min(pool)]


def run_local(P: int, fn: Callable[..., Any], *args, timeout: float = DEFAULT_TIMEOUT,
              exclusive_compute: bool = False, **kwargs) -> list[Any]:
    """Run ``fn(ctx, *args, **kwargs)`` on P threads with isolated state."""
    world = LocalWorld(P)
    gate = threading.RLock() if exclusive_compute else None
    results: list[Any] = [None] * P
    errors: dict[int, BaseException] = {}

    def body(rank: int) -> None:
        ctx = WorkerContext(rank, P, world.endpoint(rank), timeout=timeout, compute_gate=gate)
        try:
            results[rank] = fn(ctx, *args, **kwargs)
        except BaseException as e:  # noqa: BLE001 - reported to the launcher
            errors[rank] = e
            world.abort.set()

    if P == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"ddf-worker-{r}") for r in range(P)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        raise _pick_error(errors)
    return results


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _tcp_body(rank, P, coord, timeout, gate, fn, args, kwargs, out):
    ctx = None
    try:
        ctx = WorkerContext(rank, P, TcpTransport(rank, P, coord, timeout), timeout=timeout,
                            compute_gate=gate)
        res = fn(ctx, *args, **kwargs)
        out.put((rank, True, res))
    except BaseException as e:  # noqa: BLE001
        try:
            out.put((rank, False, e))
        except Exception:
            out.put((rank, False, WorkerFailure(rank, traceback.format_exc())))
    finally:
        if ctx is not None:
            ctx.close()


def run_tcp(P: int, fn: Callable[..., Any], *args, timeout: float = DEFAULT_TIMEOUT,
            host: str = "127.0.0.1", exclusive_compute: bool = False, **kwargs) -> list[Any]:
    """Run ``fn(ctx, *args, **kwargs)`` in P forked processes over loopback TCP."""
    mctx = mp.get_context("fork")
    coord = f"{host}:{free_port(host)}"
    out = mctx.Queue()
    gate = mctx.RLock() if exclusive_compute else None
    procs = [mctx.Process(target=_tcp_body, args=(r, P, coord, timeout, gate, fn, args, kwargs, out),
                          daemon=True, name=f"ddf-tcp-{r}")
             for r in range(P)]
    for p in procs:
        p.start()
    results: list[Any] = [None] * P
    errors: dict[int, BaseException] = {}
    pending = set(range(P))
    try:
        while pending:
            # once a rank has failed, give its peers a moment to report the cause
            wait = ERROR_GRACE if errors else timeout * 4 + 30
            try:
                rank, ok, val = out.get(timeout=wait)
            except queue.Empty:
                if errors:
                    break
                raise TransportError(f"ranks {sorted(pending)} produced no result") from None
            pending.discard(rank)
            if ok:
                results[rank] = val
            else:
                errors[rank] = val
    finally:
        if errors or pending:
            for p in procs:
                if p.is_alive():
                    p.terminate()
        for p in procs:
            p.join(timeout=5)
    if errors:
        raise _pick_error(errors)
    return results


def run_world(P: int, fn: Callable[..., Any], *args, transport: str = "local", **kwargs) -> list[Any]:
    if transport == "local":
        return run_local(P, fn, *args, **kwargs)
    if transport in ("tcp", "socket"):
        return run_tcp(P, fn, *args, **kwargs)
    raise ValueError(f"unknown transport {transport!r}")


def context_from_env(timeout: float | None = None) -> WorkerContext:
    """Join a TCP world described by ``DDF_COORD``/``DDF_RANK``/``DDF_WORLD``."""
    t = TcpTransport.from_env(timeout)
    return WorkerContext(t.rank, t.world_size, t, timeout=t.timeout)


def env_world() -> tuple[int, int] | None:
    if "DDF_RANK" in os.environ and "DDF_WORLD" in os.environ:
        return int(os.environ["DDF_RANK"]), int(os.environ["DDF_WORLD"])
    return None
