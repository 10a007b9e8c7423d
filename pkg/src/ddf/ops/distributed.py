"""Distributed operators: auxiliary partitioning, communication, then a core
local operator, each phase recorded as a named stage on the context."""
from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np

from ..columnar import Column, Schema, SchemaError, Table, concat_tables, take_rows
from ..comm import (ReduceOp, WorkerContext, allgather_table, allreduce, recv_table, send_table,
                    shuffle_parts)
from ..partition import (NoKeyValuesError, PartitionAssignment, assign_by_range, hash_partition,
                         range_partition_bounds, sample_pivots, split)
from . import local
from .local import AggFunc, AggSpec, JoinKind


class JoinAlgorithm(enum.Enum):
    HASH_SHUFFLE = "hash"
    SORT_SHUFFLE = "sort"
    BROADCAST = "broadcast"


class GroupByStrategy(enum.Enum):
    SHUFFLE_COMPUTE = "shuffle_compute"
    COMBINE_SHUFFLE_REDUCE = "combine_shuffle_reduce"


class SortStrategy(enum.Enum):
    SAMPLE_SORT = "sample"
    HISTOGRAM_RANGE = "histogram"


# Stage sequences each operator records, in order.
STAGES = {
    "join/hash": ("partition", "split", "shuffle-left", "shuffle-right", "local-join"),
    "join/sort": ("partition", "split", "shuffle-left", "shuffle-right", "local-join"),
    "join/broadcast": ("broadcast", "local-join"),
    "join/broadcast-outer": ("broadcast", "local-join", "allreduce-matched"),
    "union": ("partition", "split", "shuffle-left", "shuffle-right", "local-op"),
    "difference": ("partition", "split", "shuffle-left", "shuffle-right", "local-op"),
    "groupby/shuffle_compute": ("partition", "split", "shuffle", "local-op"),
    "groupby/combine_shuffle_reduce": ("local-combine", "partition", "split", "shuffle", "local-reduce"),
    "unique": ("local-combine", "partition", "split", "shuffle", "local-reduce"),
    "sort/sample": ("local-sort", "sample", "gather-samples", "calc-pivots", "bcast-pivots",
                    "split", "shuffle", "local-merge"),
    "sort/histogram": ("sample", "allreduce-range", "binning", "split", "shuffle", "local-sort"),
    "aggregate": ("local-op", "allreduce", "finalize"),
    "window": ("halo-exchange", "local-op"),
    "select": ("local-op",),
    "project": ("local-op",),
    "map": ("local-op",),
}


# -- embarrassingly parallel ------------------------------------------------
# No communicator involvement: these run on a partition as-is.

def select(t: Table, predicate: Callable[[Table], np.ndarray]) -> Table:
    return local.select(t, predicate)


def project(t: Table, columns: Sequence[str]) -> Table:
    return local.project(t, columns)


def map_column(t: Table, column: str, fn: Callable, dtype=None) -> Table:
    return local.map_column(t, column, fn, dtype)


# -- shuffle compute --------------------------------------------------------

def _hash_shuffle_pair(ctx: WorkerContext, left: Table, right: Table,
                       lkeys: Sequence[str], rkeys: Sequence[str]) -> tuple[Table, Table]:
    P = ctx.world_size
    with ctx.stage("partition", compute=True):
        la = hash_partition(left, lkeys, P)
        ra = hash_partition(right, rkeys, P)
    with ctx.stage("split", compute=True):
        lparts = split(left, la)
        rparts = split(right, ra)
    with ctx.stage("shuffle-left"):
        left = concat_tables(shuffle_parts(ctx, lparts), left.schema)
    with ctx.stage("shuffle-right"):
        right = concat_tables(shuffle_parts(ctx, rparts), right.schema)
    return left, right


def _join_keys(left: Table, on: Sequence[str] | None) -> list[str]:
    if on is None:
        on = [left.schema.names[i] for i in left.schema.key_indices]
        if not on:
            raise SchemaError("no join keys given and the left schema declares none")
    return list(on)


def join(ctx: WorkerContext, left: Table, right: Table,
         kind: JoinKind | str = JoinKind.INNER,
         algo: JoinAlgorithm | str = JoinAlgorithm.HASH_SHUFFLE,
         on: Sequence[str] | None = None, small: str = "right") -> Table:
    """Distributed equi-join on ``on`` (default: the left schema's key columns)."""
    kind, algo = JoinKind(kind), JoinAlgorithm(algo)
    on = _join_keys(left, on)
    local.check_join_keys(left, right, on)
    if algo is JoinAlgorithm.BROADCAST:
        return broadcast_join(ctx, left, right, kind, on=on, small=small)
    left, right = _hash_shuffle_pair(ctx, left, right, on, on)
    with ctx.stage("local-join", compute=True):
        return local.local_join(left, right, on, kind, "hash" if algo is JoinAlgorithm.HASH_SHUFFLE else "sort")


def broadcast_join(ctx: WorkerContext, left: Table, right: Table,
                   kind: JoinKind | str = JoinKind.INNER, on: Sequence[str] | None = None,
                   small: str = "right") -> Table:
    """Replicate the small side on every rank and join locally; the large side never moves.

    When the join must keep unmatched rows of the small side, per-row match
    flags are OR-reduced across ranks and rank 0 alone emits the leftovers.
    """
    kind = JoinKind(kind)
    on = _join_keys(left, on)
    local.check_join_keys(left, right, on)
    if small not in ("left", "right"):
        raise ValueError("small must be 'left' or 'right'")
    small_is_right = small == "right"
    with ctx.stage("broadcast"):
        if small_is_right:
            right = allgather_table(ctx, right)
        else:
            left = allgather_table(ctx, left)
    keep_small = kind.keep_right if small_is_right else kind.keep_left
    with ctx.stage("local-join", compute=True):
        # join without the small side's unmatched rows; those are resolved globally
        local_kind = kind
        if keep_small:
            local_kind = {JoinKind.FULL: JoinKind.LEFT if small_is_right else JoinKind.RIGHT,
                          JoinKind.RIGHT: JoinKind.INNER, JoinKind.LEFT: JoinKind.INNER}[kind]
        li, ri = local.hash_join_indices(left, right, on, local_kind)
    if keep_small:
        with ctx.stage("allreduce-matched"):
            small_t, hit = (right, ri) if small_is_right else (left, li)
            matched = np.zeros(small_t.num_rows, dtype=np.int64)
            matched[hit[hit >= 0]] = 1
            matched = allreduce(ctx, matched, ReduceOp.MAX)
        if ctx.rank == 0:
            extra = np.flatnonzero(matched == 0)
            pad = np.full(extra.size, -1, dtype=np.int64)
            li = np.concatenate([li, pad if small_is_right else extra])
            ri = np.concatenate([ri, extra if small_is_right else pad])
    return local.assemble_join(left, right, on, li, ri)


def _set_op(ctx: WorkerContext, a: Table, b: Table, fn) -> Table:
    if not a.schema.same_fields(b.schema):
        raise SchemaError("set operation needs identical schemas")
    names = list(a.schema.names)
    a, b = _hash_shuffle_pair(ctx, a, b, names, names)
    with ctx.stage("local-op", compute=True):
        return fn(a, b)


def union_distinct(ctx: WorkerContext, a: Table, b: Table) -> Table:
    return _set_op(ctx, a, b, local.union_distinct)


def difference(ctx: WorkerContext, a: Table, b: Table) -> Table:
    return _set_op(ctx, a, b, local.difference)


# -- combine shuffle reduce -------------------------------------------------

def _shuffle_by_keys(ctx: WorkerContext, t: Table, keys: Sequence[str]) -> Table:
    with ctx.stage("partition", compute=True):
        a = hash_partition(t, keys, ctx.world_size)
    with ctx.stage("split", compute=True):
        parts = split(t, a)
    with ctx.stage("shuffle"):
        return concat_tables(shuffle_parts(ctx, parts), t.schema)


def groupby(ctx: WorkerContext, t: Table, keys: Sequence[str], aggs: AggSpec | Sequence,
            strategy: GroupByStrategy | str = GroupByStrategy.COMBINE_SHUFFLE_REDUCE) -> Table:
    keys = list(keys)
    aggs = aggs if isinstance(aggs, AggSpec) else AggSpec(aggs)
    aggs.validate(t.schema)
    strategy = GroupByStrategy(strategy)
    if strategy is GroupByStrategy.SHUFFLE_COMPUTE:
        t = _shuffle_by_keys(ctx, t, keys)
        with ctx.stage("local-op", compute=True):
            return local.groupby(t, keys, aggs)
    with ctx.stage("local-combine", compute=True):
        partial = local.combine_groups(t, keys, aggs)
    partial = _shuffle_by_keys(ctx, partial, keys)
    with ctx.stage("local-reduce", compute=True):
        return local.reduce_groups(partial, keys, aggs)


def unique(ctx: WorkerContext, t: Table, keys: Sequence[str] | None = None) -> Table:
    """Distinct key tuples (projected onto ``keys``; all columns by default)."""
    keys = list(keys) if keys is not None else list(t.schema.names)
    with ctx.stage("local-combine", compute=True):
        t = local.distinct(t, keys)
    t = _shuffle_by_keys(ctx, t, keys)
    with ctx.stage("local-reduce", compute=True):
        return local.distinct(t)


# -- sample shuffle compute -------------------------------------------------

def sort(ctx: WorkerContext, t: Table, key: str,
         strategy: SortStrategy | str = SortStrategy.SAMPLE_SORT,
         sample_size: int | None = None, bins: int = 256) -> Table:
    """Globally sort on ``key``: rank r's rows all precede rank r+1's; nulls first."""
    strategy = SortStrategy(strategy)
    col_dtype = t.schema.dtype(key)
    if strategy is SortStrategy.HISTOGRAM_RANGE:
        if not col_dtype.is_numeric:
            raise TypeError("histogram range sort needs a numeric key")
        try:
            bounds = range_partition_bounds(ctx, t[key], ctx.world_size, bins)
            dest = assign_by_range(t[key], bounds)
        except NoKeyValuesError:
            # raised on every rank alike: only nulls, which all belong to rank 0
            dest = PartitionAssignment(np.zeros(t.num_rows, np.int64), ctx.world_size)
        with ctx.stage("split", compute=True):
            parts = split(t, dest)
        with ctx.stage("shuffle"):
            received = concat_tables(shuffle_parts(ctx, parts), t.schema)
        with ctx.stage("local-sort", compute=True):
            return local.sort_table(received, key)
    with ctx.stage("local-sort", compute=True):
        t = local.sort_table(t, key)
    bounds = sample_pivots(ctx, t[key], sample_size)
    with ctx.stage("split", compute=True):
        parts = split(t, assign_by_range(t[key], bounds))
    with ctx.stage("shuffle"):
        runs = shuffle_parts(ctx, parts)
    with ctx.stage("local-merge", compute=True):
        return local.kway_merge(runs, key)


# -- globally reduce --------------------------------------------------------

def column_aggregate(ctx: WorkerContext, t: Table, aggs: AggSpec | Sequence) -> Table:
    """One-row table of whole-column aggregates, identical on every rank."""
    aggs = aggs if isinstance(aggs, AggSpec) else AggSpec(aggs)
    aggs.validate(t.schema)
    for c, f in aggs:
        if f in (AggFunc.MIN, AggFunc.MAX) and not t.schema.dtype(c).is_numeric:
            raise TypeError(f"column aggregate {f.value} needs a numeric column, {c!r} is not")
    with ctx.stage("local-op", compute=True):
        partials = []
        for c, f in aggs:
            col = t[c]
            vals = col.data[col.is_valid()] if col.dtype.is_numeric else None
            count = int(col.length - col.null_count)
            if f is AggFunc.COUNT:
                partials.append(([count], ReduceOp.SUM, None))
            elif f in (AggFunc.SUM, AggFunc.MEAN):
                s = vals.sum(dtype=col.dtype.numpy) if vals.size else col.dtype.numpy.type(0)
                partials.append(([s], ReduceOp.SUM, [count]))
            else:
                ident = local._identity(col.dtype, f)
                v = (vals.min() if f is AggFunc.MIN else vals.max()) if vals.size else ident
                partials.append(([v], ReduceOp(f.value), [count]))
    with ctx.stage("allreduce"):
        reduced = []
        for vals, op, count in partials:
            r = allreduce(ctx, vals, op)
            n = allreduce(ctx, count, ReduceOp.SUM) if count is not None else None
            reduced.append((r, n))
    with ctx.stage("finalize", compute=True):
        cols = []
        for (c, f), (r, n) in zip(aggs, reduced):
            dt = t.schema.dtype(c)
            if f is AggFunc.COUNT:
                cols.append(Column.from_numpy(r.astype(np.int64)))
            elif f is AggFunc.SUM:
                cols.append(Column.from_numpy(r.astype(dt.numpy)))
            elif f is AggFunc.MEAN:
                if n[0] == 0:
                    raise ZeroDivisionError(f"mean of {c!r} over an empty distributed column")
                cols.append(Column.from_numpy(np.array([r[0] / n[0]], dtype=np.float64)))
            else:
                cols.append(Column.from_numpy(r.astype(dt.numpy), np.array([n[0] > 0])))
        schema = Schema(tuple(aggs.output_names()), tuple(c.dtype for c in cols))
        return Table(schema, tuple(cols))


# -- halo exchange ----------------------------------------------------------

def rolling_window(ctx: WorkerContext, t: Table, column: str, window: int, agg: str = "sum") -> Table:
    """Trailing rolling sum over the rank-major global row order.

    Each rank receives up to ``window - 1`` preceding rows from its left
    neighbour.  A neighbour shorter than that forwards its own halo too, so
    short partitions still see every row the window reaches.
    """
    if agg != "sum":
        raise ValueError("only rolling sum is supported")
    if window < 1:
        raise ValueError("window must be >= 1")
    P, me = ctx.world_size, ctx.rank
    need = window - 1
    vals = Table(Schema((column,), (t.schema.dtype(column),)), (t[column],))
    with ctx.stage("halo-exchange"):
        halo = Table.empty(vals.schema)
        if need and P > 1:
            sent = False
            if me < P - 1 and vals.num_rows >= need:
                send_table(ctx, take_rows(vals, range(vals.num_rows - need, vals.num_rows)), me + 1)
                sent = True
            if me > 0:
                halo = recv_table(ctx, me - 1)
            if me < P - 1 and not sent:
                ext = concat_tables([halo, vals])
                k = min(need, ext.num_rows)
                send_table(ctx, take_rows(ext, range(ext.num_rows - k, ext.num_rows)), me + 1)
    with ctx.stage("local-op", compute=True):
        ext = concat_tables([halo, vals])
        out = local.rolling_sum(ext[column], window, lead=halo.num_rows)
        name = f"{column}_rolling_sum"
        schema = Schema(tuple(t.schema.names) + (name,), tuple(t.schema.dtypes) + (out.dtype,))
        return Table(schema, tuple(t.columns) + (out,))
