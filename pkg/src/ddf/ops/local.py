"""Single-partition operator kernels.

These are the "core local operators" the distributed operators finish with.
Null keys are an ordinary key value here: they group together and match each
other in joins.
"""
from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..columnar import (Column, DataType, Schema, SchemaError, Table, concat_tables, sort_indices,
                        take_rows)


class JoinKind(enum.Enum):
    INNER = "inner"
    LEFT = "left"
    RIGHT = "right"
    FULL = "full"

    @property
    def keep_left(self) -> bool:
        return self in (JoinKind.LEFT, JoinKind.FULL)

    @property
    def keep_right(self) -> bool:
        return self in (JoinKind.RIGHT, JoinKind.FULL)


class AggFunc(enum.Enum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    COUNT = "count"
    MEAN = "mean"


@dataclass(frozen=True)
class AggSpec:
    aggs: tuple[tuple[str, AggFunc], ...]

    def __init__(self, aggs: Iterable[tuple[str, AggFunc | str]]):
        object.__setattr__(self, "aggs", tuple((c, AggFunc(f)) for c, f in aggs))

    def __iter__(self):
        return iter(self.aggs)

    def output_names(self) -> list[str]:
        return [f"{c}_{f.value}" for c, f in self.aggs]

    def validate(self, schema: Schema) -> None:
        for col, f in self.aggs:
            dt = schema.dtype(col)
            if f in (AggFunc.SUM, AggFunc.MEAN) and not dt.is_numeric:
                raise TypeError(f"cannot {f.value} non-numeric column {col!r} ({dt.name})")


# -- keys -------------------------------------------------------------------

def key_tuples(t: Table, cols: Sequence[str]) -> list[tuple]:
    return list(zip(*(t[c].to_pylist() for c in cols))) if t.num_rows else []


def group_ids(t: Table, cols: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Dense group id per row (in first-appearance order) and each group's first row."""
    seen: dict[tuple, int] = {}
    ids = np.empty(t.num_rows, dtype=np.int64)
    first = []
    for i, k in enumerate(key_tuples(t, cols)):
        g = seen.get(k)
        if g is None:
            g = seen[k] = len(first)
            first.append(i)
        ids[i] = g
    return ids, np.asarray(first, dtype=np.int64)


def check_join_keys(left: Table, right: Table, on: Sequence[str]) -> None:
    if not on:
        raise ValueError("join needs at least one key column")
    for k in on:
        dl, dr = left.schema.dtype(k), right.schema.dtype(k)
        if dl != dr:
            raise SchemaError(f"join key {k!r} has dtype {dl.name} on the left and {dr.name} on the right")


# -- embarrassingly parallel ------------------------------------------------

def select(t: Table, predicate: Callable[[Table], np.ndarray]) -> Table:
    """Keep rows where ``predicate(t)`` (a boolean mask over rows) is true."""
    mask = np.asarray(predicate(t), dtype=bool)
    if mask.shape != (t.num_rows,):
        raise ValueError("predicate must return one boolean per row")
    return take_rows(t, np.flatnonzero(mask))


def project(t: Table, columns: Sequence[str]) -> Table:
    idx = [t.schema.index(c) for c in columns]
    schema = Schema(tuple(t.schema.names[i] for i in idx), tuple(t.schema.dtypes[i] for i in idx))
    return Table(schema, tuple(t.columns[i] for i in idx))


def map_column(t: Table, column: str, fn: Callable, dtype: DataType | None = None) -> Table:
    """Apply ``fn`` to each non-null value of ``column``; nulls stay null."""
    j = t.schema.index(column)
    dtype = DataType(dtype) if dtype is not None else t.schema.dtypes[j]
    vals = [None if v is None else fn(v) for v in t.columns[j].to_pylist()]
    cols = list(t.columns)
    cols[j] = Column.from_values(dtype, vals)
    dtypes = list(t.schema.dtypes)
    dtypes[j] = dtype
    return Table(Schema(t.schema.names, tuple(dtypes), t.schema.key_indices), tuple(cols))


# -- joins ------------------------------------------------------------------

def hash_join_indices(left: Table, right: Table, on: Sequence[str], kind: JoinKind):
    """Row index pairs of a hash join; -1 marks the missing side of outer rows.

    The hash table is built on the smaller input and probed with the larger.
    """
    lk, rk = key_tuples(left, on), key_tuples(right, on)
    build_right = len(rk) <= len(lk)
    build, probe = (rk, lk) if build_right else (lk, rk)
    table: dict[tuple, list[int]] = {}
    for i, k in enumerate(build):
        table.setdefault(k, []).append(i)
    li, ri = [], []
    keep_probe = kind.keep_left if build_right else kind.keep_right
    keep_build = kind.keep_right if build_right else kind.keep_left
    matched = np.zeros(len(build), dtype=bool)
    pi, bi = (li, ri) if build_right else (ri, li)
    for i, k in enumerate(probe):
        hits = table.get(k)
        if hits:
            for j in hits:
                pi.append(i)
                bi.append(j)
            matched[hits] = True
        elif keep_probe:
            pi.append(i)
            bi.append(-1)
    if keep_build:
        for j in np.flatnonzero(~matched).tolist():
            pi.append(-1)
            bi.append(j)
    return np.asarray(li, dtype=np.int64), np.asarray(ri, dtype=np.int64)


def _cmp_keys(t: Table, on: Sequence[str], order: np.ndarray) -> list[tuple]:
    cols = [t[c].take(order).to_pylist() for c in on]
    return [tuple((0, 0) if v is None else (1, v) for v in row) for row in zip(*cols)]


def sort_merge_join_indices(left: Table, right: Table, on: Sequence[str], kind: JoinKind):
    lo, ro = sort_indices(left, on), sort_indices(right, on)
    lk, rk = _cmp_keys(left, on, lo), _cmp_keys(right, on, ro)
    li, ri = [], []
    i = j = 0
    nl, nr = len(lk), len(rk)
    while i < nl and j < nr:
        if lk[i] < rk[j]:
            if kind.keep_left:
                li.append(lo[i]); ri.append(-1)
            i += 1
        elif rk[j] < lk[i]:
            if kind.keep_right:
                li.append(-1); ri.append(ro[j])
            j += 1
        else:
            i2, j2 = i, j
            while i2 < nl and lk[i2] == lk[i]:
                i2 += 1
            while j2 < nr and rk[j2] == rk[j]:
                j2 += 1
            for a in range(i, i2):
                for b in range(j, j2):
                    li.append(lo[a]); ri.append(ro[b])
            i, j = i2, j2
    if kind.keep_left:
        for a in range(i, nl):
            li.append(lo[a]); ri.append(-1)
    if kind.keep_right:
        for b in range(j, nr):
            li.append(-1); ri.append(ro[b])
    return np.asarray(li, dtype=np.int64), np.asarray(ri, dtype=np.int64)


def join_schema(left: Schema, right: Schema, on: Sequence[str]) -> tuple[Schema, list[str], list[str]]:
    """Output layout: keys, left non-keys, right non-keys (``_right`` on clashes)."""
    lrest = [n for n in left.names if n not in on]
    rrest = [n for n in right.names if n not in on]
    names = list(on) + lrest
    out_r = []
    for n in rrest:
        m = n
        while m in names:
            m += "_right"
        names.append(m)
        out_r.append(m)
    dtypes = [left.dtype(k) for k in on] + [left.dtype(n) for n in lrest] + [right.dtype(n) for n in rrest]
    return Schema(tuple(names), tuple(dtypes)), lrest, rrest


def assemble_join(left: Table, right: Table, on: Sequence[str], li: np.ndarray, ri: np.ndarray) -> Table:
    schema, lrest, rrest = join_schema(left.schema, right.schema, on)
    cols = []
    for k in on:
        both = concat_tables([Table(Schema((k,), (left.schema.dtype(k),)), (left[k],)),
                              Table(Schema((k,), (right.schema.dtype(k),)), (right[k],))])
        pick = np.where(li >= 0, li, np.where(ri >= 0, left.num_rows + ri, -1))
        cols.append(both.columns[0].take(pick))
    cols += [left[n].take(li) for n in lrest]
    cols += [right[n].take(ri) for n in rrest]
    return Table(schema, tuple(cols))


def local_join(left: Table, right: Table, on: Sequence[str], kind: JoinKind = JoinKind.INNER,
               method: str = "hash") -> Table:
    check_join_keys(left, right, on)
    kind = JoinKind(kind)
    if method == "hash":
        li, ri = hash_join_indices(left, right, on, kind)
    elif method == "sort":
        li, ri = sort_merge_join_indices(left, right, on, kind)
    else:
        raise ValueError(f"unknown local join method {method!r}")
    return assemble_join(left, right, on, li, ri)


# -- set operations ---------------------------------------------------------

def distinct(t: Table, cols: Sequence[str] | None = None) -> Table:
    """First occurrence of each distinct row (projected onto ``cols`` if given)."""
    if cols is not None:
        t = project(t, cols)
    _, first = group_ids(t, t.schema.names)
    return take_rows(t, first)


def union_distinct(a: Table, b: Table) -> Table:
    if not a.schema.same_fields(b.schema):
        raise SchemaError("union needs identical schemas")
    return distinct(concat_tables([a, b], a.schema))


def difference(a: Table, b: Table) -> Table:
    if not a.schema.same_fields(b.schema):
        raise SchemaError("difference needs identical schemas")
    drop = set(key_tuples(b, b.schema.names))
    d = distinct(a)
    keep = [i for i, k in enumerate(key_tuples(d, d.schema.names)) if k not in drop]
    return take_rows(d, keep)


# -- grouped aggregation ----------------------------------------------------

def _identity(dt: DataType, fn: AggFunc):
    if dt is DataType.FLOAT64:
        return np.inf if fn is AggFunc.MIN else -np.inf
    info = np.iinfo(np.int64)
    return info.max if fn is AggFunc.MIN else info.min


def _reduce_groups(col: Column, ids: np.ndarray, ngroups: int, fn: AggFunc) -> Column:
    """Aggregate one column per group.  Sum of an all-null group is 0;
    Min/Max/Mean of an all-null group are null."""
    valid = col.is_valid()
    counts = np.bincount(ids[valid], minlength=ngroups).astype(np.int64)
    if fn is AggFunc.COUNT:
        return Column.from_numpy(counts)
    if col.dtype is DataType.UTF8 or (col.dtype is DataType.BOOL and fn in (AggFunc.MIN, AggFunc.MAX)):
        best: list = [None] * ngroups
        pick = min if fn is AggFunc.MIN else max
        for g, v in zip(ids.tolist(), col.to_pylist()):
            if v is not None:
                best[g] = v if best[g] is None else pick(best[g], v)
        return Column.from_values(col.dtype, best)
    data = col.data[valid]
    gid = ids[valid]
    if fn in (AggFunc.SUM, AggFunc.MEAN):
        acc = np.zeros(ngroups, dtype=col.dtype.numpy)
        np.add.at(acc, gid, data)
        if fn is AggFunc.SUM:
            return Column.from_numpy(acc)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = acc.astype(np.float64) / counts
        return Column.from_numpy(np.where(counts > 0, mean, 0.0), counts > 0)
    acc = np.full(ngroups, _identity(col.dtype, fn), dtype=col.dtype.numpy)
    (np.minimum if fn is AggFunc.MIN else np.maximum).at(acc, gid, data)
    return Column.from_numpy(np.where(counts > 0, acc, 0).astype(col.dtype.numpy), counts > 0)


def groupby(t: Table, keys: Sequence[str], aggs: AggSpec) -> Table:
    aggs = aggs if isinstance(aggs, AggSpec) else AggSpec(aggs)
    aggs.validate(t.schema)
    ids, first = group_ids(t, keys)
    out_keys = take_rows(project(t, keys), first)
    cols = [_reduce_groups(t[c], ids, first.size, f) for c, f in aggs]
    names = list(keys) + aggs.output_names()
    return Table(Schema(tuple(names), tuple(list(out_keys.schema.dtypes) + [c.dtype for c in cols])),
                 tuple(list(out_keys.columns) + cols))


# Combine/reduce split of an aggregation: which partials each function needs
# and how partials merge in the final reduction.
_PARTIALS = {
    AggFunc.SUM: (AggFunc.SUM,),
    AggFunc.COUNT: (AggFunc.COUNT,),
    AggFunc.MIN: (AggFunc.MIN,),
    AggFunc.MAX: (AggFunc.MAX,),
    AggFunc.MEAN: (AggFunc.SUM, AggFunc.COUNT),
}
_MERGE = {AggFunc.SUM: AggFunc.SUM, AggFunc.COUNT: AggFunc.SUM,
          AggFunc.MIN: AggFunc.MIN, AggFunc.MAX: AggFunc.MAX}


def partial_spec(aggs: AggSpec) -> list[tuple[str, AggFunc, str]]:
    out = []
    for i, (c, f) in enumerate(aggs):
        for p in _PARTIALS[f]:
            out.append((c, p, f"__{i}_{p.value}"))
    return out


def combine_groups(t: Table, keys: Sequence[str], aggs: AggSpec) -> Table:
    """Local pre-aggregation producing mergeable partial columns."""
    aggs.validate(t.schema)
    parts = partial_spec(aggs)
    ids, first = group_ids(t, keys)
    out_keys = take_rows(project(t, keys), first)
    cols = [_reduce_groups(t[c], ids, first.size, p) for c, p, _ in parts]
    names = list(keys) + [n for _, _, n in parts]
    return Table(Schema(tuple(names), tuple(list(out_keys.schema.dtypes) + [c.dtype for c in cols])),
                 tuple(list(out_keys.columns) + cols))


def reduce_groups(partials: Table, keys: Sequence[str], aggs: AggSpec) -> Table:
    """Merge partial columns per key and finalise each aggregation."""
    parts = partial_spec(aggs)
    ids, first = group_ids(partials, keys)
    out_keys = take_rows(project(partials, keys), first)
    merged = {n: _reduce_groups(partials[n], ids, first.size, _MERGE[p]) for _, p, n in parts}
    cols = []
    for i, (c, f) in enumerate(aggs):
        if f is AggFunc.MEAN:
            s = merged[f"__{i}_sum"].data.astype(np.float64)
            n = merged[f"__{i}_count"].data
            with np.errstate(invalid="ignore", divide="ignore"):
                cols.append(Column.from_numpy(np.where(n > 0, s / np.maximum(n, 1), 0.0), n > 0))
        else:
            cols.append(merged[f"__{i}_{_PARTIALS[f][0].value}"])
    names = list(keys) + aggs.output_names()
    return Table(Schema(tuple(names), tuple(list(out_keys.schema.dtypes) + [c.dtype for c in cols])),
                 tuple(list(out_keys.columns) + cols))


# -- sorting ----------------------------------------------------------------

def sort_table(t: Table, key: str) -> Table:
    return take_rows(t, sort_indices(t, [key]))


def kway_merge(runs: Sequence[Table], key: str) -> Table:
    """Merge tables already sorted on ``key`` (nulls first); ties keep run order."""
    if not runs:
        raise ValueError("kway_merge needs at least one run")
    schema = runs[0].schema
    runs = [r for r in runs if r.num_rows]
    if len(runs) <= 1:
        return runs[0] if runs else Table.empty(schema)
    streams = []
    base = 0
    for r in runs:
        vals = r[key].to_pylist()
        streams.append([((0, 0) if v is None else (1, v), base + i) for i, v in enumerate(vals)])
        base += r.num_rows
    order = [i for _, i in heapq.merge(*streams, key=lambda e: e[0])]
    return take_rows(concat_tables(runs), order)


# -- windows ----------------------------------------------------------------

def rolling_sum(values: Column, window: int, lead: int = 0) -> Column:
    """Trailing-window sums over ``values``; the first ``lead`` rows are halo
    context and are not emitted.  A window that is incomplete or holds a null
    yields null."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not values.dtype.is_numeric:
        raise TypeError("rolling sum needs a numeric column")
    n = values.length
    if n <= lead:
        return Column.empty(values.dtype)
    valid = values.is_valid()
    data = np.where(valid, values.data, 0).astype(values.dtype.numpy)
    pad = window - 1
    data = np.concatenate([np.zeros(pad, data.dtype), data])
    ok = np.concatenate([np.zeros(pad, bool), valid])
    wins = np.lib.stride_tricks.sliding_window_view(data, window)[lead:]
    full = np.lib.stride_tricks.sliding_window_view(ok, window)[lead:].all(axis=1)
    return Column.from_numpy(wins.sum(axis=1).astype(values.dtype.numpy), full)


__all__ = [
    "AggFunc", "AggSpec", "JoinKind", "assemble_join", "check_join_keys", "combine_groups",
    "difference", "distinct", "group_ids", "groupby", "hash_join_indices", "join_schema",
    "key_tuples", "kway_merge", "local_join", "map_column", "project", "reduce_groups",
    "rolling_sum", "select", "sort_merge_join_indices", "sort_table", "union_distinct",
]
