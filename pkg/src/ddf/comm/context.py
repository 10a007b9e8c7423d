"""BSP communicator: buffer channels plus table/array/scalar collectives.

Every collective must be entered by all ranks in the same order.  Remote
payload bytes are counted per :class:`CollectiveKind`; channel metadata and
frame headers are not payload.  Nested collectives (allgather is gather then
broadcast) charge the outermost kind.
"""
from __future__ import annotations

import contextlib
import enum
import math
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..columnar import (SchemaError, SerializedTable, Table, concat_tables, deserialize_table,
                        serialize_table, split_rows)
from .transport import DEFAULT_TIMEOUT, PHASE_DATA, PHASE_META, TransportError, make_tag


class CollectiveKind(enum.Enum):
    SEND_RECV = "send_recv"
    SHUFFLE = "shuffle"
    SCATTER = "scatter"
    GATHER = "gather"
    ALLGATHER = "allgather"
    BROADCAST = "broadcast"
    REDUCE = "reduce"
    ALLREDUCE = "allreduce"
    BARRIER = "barrier"


class ReduceOp(enum.Enum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    COUNT = "count"  # partial counts combine by addition

    def combine(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self is ReduceOp.MIN:
            return np.minimum(a, b)
        if self is ReduceOp.MAX:
            return np.maximum(a, b)
        return a + b


class CollectiveError(RuntimeError):
    """A collective failed on some rank; raised consistently on every rank."""


@dataclass
class BufferRequest:
    data: bytes
    index: int
    dest: int
    size: int = -1

    def __post_init__(self):
        if self.size < 0:
            self.size = len(self.data)
        if self.size != len(self.data):
            raise ValueError("BufferRequest size disagrees with buffer length")


@dataclass
class StageRecord:
    name: str
    wall_s: float
    cpu_s: float
    bytes: int


@dataclass
class WorkerContext:
    rank: int
    world_size: int
    transport: object
    timeout: float = DEFAULT_TIMEOUT
    compute_gate: threading.Lock | None = None
    counters: dict = field(default_factory=lambda: {k: 0 for k in CollectiveKind})
    stages: list[StageRecord] = field(default_factory=list)
    _kind: CollectiveKind | None = None

    def __post_init__(self):
        if not 0 <= self.rank < self.world_size:
            raise ValueError(f"rank {self.rank} outside world of {self.world_size}")

    # accounting -----------------------------------------------------------
    def bytes_sent(self) -> dict[CollectiveKind, int]:
        return dict(self.counters)

    @property
    def total_bytes(self) -> int:
        return sum(self.counters.values())

    def reset_counters(self) -> None:
        for k in self.counters:
            self.counters[k] = 0

    @contextlib.contextmanager
    def collective(self, kind: CollectiveKind):
        outer = self._kind
        if outer is None:
            self._kind = kind
        try:
            yield
        finally:
            self._kind = outer

    @contextlib.contextmanager
    def stage(self, name: str, compute: bool = False):
        """Time a named operator stage; compute stages take the host gate if set."""
        gate = self.compute_gate if compute else None
        if gate is not None:
            gate.acquire()
        b0 = self.total_bytes
        w0, c0 = time.perf_counter(), time.thread_time()
        try:
            yield
        finally:
            self.stages.append(StageRecord(name, time.perf_counter() - w0,
                                           time.thread_time() - c0, self.total_bytes - b0))
            if gate is not None:
                gate.release()

    # point to point -------------------------------------------------------
    def send_frames(self, dest: int, frames: Sequence[bytes]) -> None:
        """Two-phase send: a metadata frame of sizes, then one frame per buffer."""
        sizes = [len(f) for f in frames]
        t = self.transport
        t.send(dest, make_tag(self.rank, PHASE_META, 0), struct.pack(f"<I{len(sizes)}Q", len(sizes), *sizes))
        for i, f in enumerate(frames):
            t.send(dest, make_tag(self.rank, PHASE_DATA, i), f)
        kind = self._kind or CollectiveKind.SEND_RECV
        self.counters[kind] += sum(sizes)

    def recv_frames(self, src: int) -> list[bytes]:
        t = self.transport
        meta = t.recv(src, make_tag(src, PHASE_META, 0), self.timeout)
        (n,) = struct.unpack_from("<I", meta)
        sizes = struct.unpack_from(f"<{n}Q", meta, 4)
        out = []
        for i, want in enumerate(sizes):
            buf = t.recv(src, make_tag(src, PHASE_DATA, i), self.timeout)
            if len(buf) != want:
                raise TransportError(
                    f"rank {self.rank}: short read from rank {src} in data phase, "
                    f"buffer {i}: expected {want} bytes, got {len(buf)}")
            out.append(buf)
        return out

    def close(self) -> None:
        self.transport.close()


def _check_root(ctx: WorkerContext, root: int) -> None:
    if not 0 <= root < ctx.world_size:
        raise ValueError(f"invalid root {root} for world of {ctx.world_size}")


# -- channels ---------------------------------------------------------------

def channel_exchange(ctx: WorkerContext, outgoing: Sequence[Sequence[BufferRequest]]) -> list[list[bytes]]:
    """Exchange buffers with every rank; returns buffers received per source rank.

    Buffers addressed to self are handed back without touching the transport.
    Sends are posted in the pairwise order ``rank+1, rank+2, ...`` and receives
    drained in ``rank-1, rank-2, ...`` order.
    """
    P, me = ctx.world_size, ctx.rank
    if len(outgoing) != P:
        raise ValueError(f"need one request list per rank, got {len(outgoing)}")
    for dest, reqs in enumerate(outgoing):
        for r in reqs:
            if r.dest != dest:
                raise ValueError(f"request addressed to {r.dest} placed in slot {dest}")
    ordered = [[r.data for r in sorted(reqs, key=lambda r: r.index)] for reqs in outgoing]
    received: list[list[bytes]] = [[] for _ in range(P)]
    received[me] = list(ordered[me])
    for step in range(1, P):
        dest = (me + step) % P
        ctx.send_frames(dest, ordered[dest])
    for step in range(1, P):
        src = (me - step) % P
        received[src] = ctx.recv_frames(src)
    return received


def _frames_of(t: Table) -> list[bytes]:
    return serialize_table(t).frames()


def _table_of(frames: Sequence[bytes]) -> Table:
    return deserialize_table(SerializedTable.from_frames(frames))


def shuffle_parts(ctx: WorkerContext, parts: Sequence[Table]) -> list[Table]:
    """Send ``parts[r]`` to rank r; returns the tables received, by source rank.

    Empty sub-tables are not transmitted; the receiver substitutes an empty
    table with its own schema.
    """
    P, me = ctx.world_size, ctx.rank
    if len(parts) != P:
        raise ValueError(f"need {P} parts, got {len(parts)}")
    schema = parts[me].schema
    with ctx.collective(CollectiveKind.SHUFFLE):
        outgoing = []
        for dest, part in enumerate(parts):
            if dest == me or part.num_rows == 0:
                outgoing.append([])
            else:
                outgoing.append([BufferRequest(f, i, dest) for i, f in enumerate(_frames_of(part))])
        got = channel_exchange(ctx, outgoing)
    out = []
    for src, frames in enumerate(got):
        if src == me:
            out.append(parts[me])
        elif frames:
            out.append(_table_of(frames))
        else:
            out.append(Table.empty(schema))
    return out


def shuffle_table(ctx: WorkerContext, t: Table, dest: np.ndarray | Sequence[int]) -> Table:
    """Route each row to its destination rank; result is received rows in source-rank order."""
    dest = np.asarray(dest, dtype=np.int64)
    if dest.shape != (t.num_rows,):
        raise ValueError(f"destination map has {dest.size} entries for {t.num_rows} rows")
    if dest.size and (dest.min() < 0 or dest.max() >= ctx.world_size):
        raise ValueError(f"destination rank outside [0, {ctx.world_size})")
    parts = split_rows(t, dest, ctx.world_size)
    received = shuffle_parts(ctx, parts)
    return concat_tables(received, t.schema)


# -- trees ------------------------------------------------------------------

def binomial_rounds(P: int) -> int:
    return math.ceil(math.log2(P)) if P > 1 else 0


def binomial_schedule(P: int, root: int = 0) -> list[list[tuple[int, int]]]:
    """Per round, the (src, dst) pairs of a binomial-tree broadcast from ``root``."""
    rounds = []
    for k in range(binomial_rounds(P)):
        mask = 1 << k
        pairs = [((v + root) % P, (v + mask + root) % P) for v in range(mask) if v + mask < P]
        rounds.append(pairs)
    return rounds


def _bcast_frames(ctx: WorkerContext, frames: Sequence[bytes] | None, root: int) -> list[bytes]:
    P = ctx.world_size
    vr = (ctx.rank - root) % P
    have = list(frames) if vr == 0 else None
    for k in range(binomial_rounds(P)):
        mask = 1 << k
        if vr < mask and vr + mask < P:
            ctx.send_frames((vr + mask + root) % P, have)
        elif mask <= vr < 2 * mask:
            have = ctx.recv_frames((vr - mask + root) % P)
    return have


_OK, _ERR = b"\x00", b"\x01"


def _raise_if_error(frames: Sequence[bytes]) -> list[bytes]:
    if frames[0] == _ERR:
        raise CollectiveError(frames[1].decode())
    return list(frames[1:])


def broadcast_table(ctx: WorkerContext, t: Table | None, root: int = 0) -> Table:
    _check_root(ctx, root)
    with ctx.collective(CollectiveKind.BROADCAST):
        frames = _bcast_frames(ctx, _frames_of(t) if ctx.rank == root else None, root)
    return t if ctx.rank == root else _table_of(frames)


def scatter_table(ctx: WorkerContext, parts: Sequence[Table] | None, root: int = 0) -> Table:
    _check_root(ctx, root)
    with ctx.collective(CollectiveKind.SCATTER):
        if ctx.rank == root:
            if len(parts) != ctx.world_size:
                raise ValueError("scatter needs one part per rank")
            for dest, part in enumerate(parts):
                if dest != root:
                    ctx.send_frames(dest, _frames_of(part))
            return parts[root]
        return _table_of(ctx.recv_frames(root))


def gather_table(ctx: WorkerContext, t: Table, root: int = 0) -> Table | None:
    """Root gets the rank-ordered concatenation; other ranks get ``None``."""
    _check_root(ctx, root)
    with ctx.collective(CollectiveKind.GATHER):
        if ctx.rank != root:
            ctx.send_frames(root, _frames_of(t))
            return None
        parts = [t if r == root else _table_of(ctx.recv_frames(r)) for r in range(ctx.world_size)]
    return concat_tables(parts, t.schema)


def allgather_table(ctx: WorkerContext, t: Table) -> Table:
    with ctx.collective(CollectiveKind.ALLGATHER):
        err = None
        try:
            full = gather_table(ctx, t, 0)
        except SchemaError as e:
            full, err = None, e
        if ctx.rank == 0:
            frames = [_ERR, str(err).encode()] if err else [_OK, *_frames_of(full)]
        else:
            frames = None
        frames = _bcast_frames(ctx, frames, 0)
    if frames[0] == _ERR:
        raise SchemaError(f"allgather schema mismatch: {frames[1].decode()}")
    return full if ctx.rank == 0 else _table_of(frames[1:])


def send_table(ctx: WorkerContext, t: Table, dest: int) -> None:
    with ctx.collective(CollectiveKind.SEND_RECV):
        ctx.send_frames(dest, _frames_of(t))


def recv_table(ctx: WorkerContext, src: int) -> Table:
    with ctx.collective(CollectiveKind.SEND_RECV):
        return _table_of(ctx.recv_frames(src))


# -- arrays -----------------------------------------------------------------

_DT = {0: np.dtype("<i8"), 1: np.dtype("<f8")}


def _array_frames(a: np.ndarray) -> list[bytes]:
    code = 1 if a.dtype.kind == "f" else 0
    return [struct.pack("<BQ", code, a.size), np.ascontiguousarray(a, dtype=_DT[code]).tobytes()]


def _array_of(frames: Sequence[bytes]) -> np.ndarray:
    code, n = struct.unpack("<BQ", frames[0])
    return np.frombuffer(frames[1], dtype=_DT[code]).copy()


def _as_array(values) -> np.ndarray:
    a = np.asarray(values)
    if a.dtype.kind in "biu":
        return a.astype("<i8").reshape(-1)
    if a.dtype.kind == "f":
        return a.astype("<f8").reshape(-1)
    raise TypeError(f"allreduce needs a numeric array, got {a.dtype}")


def reduce(ctx: WorkerContext, values, op: ReduceOp, root: int = 0) -> np.ndarray | None:
    """Binomial-tree reduction; the root gets the result, others ``None``."""
    _check_root(ctx, root)
    with ctx.collective(CollectiveKind.REDUCE):
        status, acc = _tree_reduce(ctx, _as_array(values), ReduceOp(op), root)
        if ctx.rank != root:
            return None
    if status:
        raise CollectiveError(status)
    return acc


def _tree_reduce(ctx: WorkerContext, acc: np.ndarray, op: ReduceOp, root: int):
    P = ctx.world_size
    vr = (ctx.rank - root) % P
    status = ""
    mask = 1
    while mask < P:
        if vr & mask:
            frames = [_ERR, status.encode()] if status else [_OK, *_array_frames(acc)]
            ctx.send_frames((vr - mask + root) % P, frames)
            return status, None
        if vr + mask < P:
            got = ctx.recv_frames((vr + mask + root) % P)
            if status:
                pass
            elif got[0] == _ERR:
                status = got[1].decode()
            else:
                other = _array_of(got[1:])
                if other.shape != acc.shape or other.dtype != acc.dtype:
                    status = (f"allreduce operand mismatch: {acc.dtype}[{acc.size}] "
                              f"vs {other.dtype}[{other.size}]")
                else:
                    acc = op.combine(acc, other)
        mask <<= 1
    return status, acc


def allreduce(ctx: WorkerContext, values, op: ReduceOp) -> np.ndarray:
    """Elementwise reduction, identical on every rank (tree reduce then broadcast)."""
    with ctx.collective(CollectiveKind.ALLREDUCE):
        status, acc = _tree_reduce(ctx, _as_array(values), ReduceOp(op), 0)
        if ctx.rank == 0:
            frames = [_ERR, status.encode()] if status else [_OK, *_array_frames(acc)]
        else:
            frames = None
        frames = _bcast_frames(ctx, frames, 0)
    return _array_of(_raise_if_error(frames))


def allgather_counts(ctx: WorkerContext, value: int) -> np.ndarray:
    """Every rank's integer ``value``, indexed by rank."""
    v = np.zeros(ctx.world_size, dtype=np.int64)
    v[ctx.rank] = value
    return allreduce(ctx, v, ReduceOp.SUM)


def barrier(ctx: WorkerContext) -> None:
    """Dissemination barrier: ceil(log2 P) rounds of empty messages."""
    P = ctx.world_size
    with ctx.collective(CollectiveKind.BARRIER):
        for k in range(binomial_rounds(P)):
            d = 1 << k
            ctx.send_frames((ctx.rank + d) % P, [])
            ctx.recv_frames((ctx.rank - d) % P)


def bytes_sent(ctx: WorkerContext) -> dict[CollectiveKind, int]:
    return ctx.bytes_sent()
