"""Auxiliary sub-operators that decide where rows go before a shuffle."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .columnar import Column, DataType, Schema, Table, sort_indices, split_rows, take_rows
from .comm import ReduceOp, WorkerContext, allgather_counts, allreduce, broadcast_table, gather_table
from .comm import shuffle_table

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)
DEFAULT_BINS = 256


class NoKeyValuesError(ValueError):
    """The key column holds no non-null value on any rank."""


@dataclass(frozen=True)
class PartitionAssignment:
    dest: np.ndarray
    P: int

    def __post_init__(self):
        d = np.asarray(self.dest, dtype=np.int64)
        object.__setattr__(self, "dest", d)
        if d.size and (d.min() < 0 or d.max() >= self.P):
            raise ValueError(f"assignment outside [0, {self.P})")

    def __len__(self) -> int:
        return self.dest.size


@dataclass(frozen=True)
class RangeBounds:
    """P-1 ascending pivots; rank r takes keys in (pivot[r-1], pivot[r]]."""
    pivots: Column
    min: object = None
    max: object = None

    @property
    def P(self) -> int:
        return self.pivots.length + 1


# -- hashing ----------------------------------------------------------------

def _fnv_bytes(h: np.ndarray, byte_rows: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Feed a (rows, k) uint8 matrix into per-row FNV-1a states.

    ``mask`` is per row, or per (row, byte) for ragged Utf8 payloads.
    """
    for j in range(byte_rows.shape[1]):
        nxt = (h ^ byte_rows[:, j].astype(np.uint64)) * FNV_PRIME
        if mask is None:
            h = nxt
        else:
            h = np.where(mask if mask.ndim == 1 else mask[:, j], nxt, h)
    return h


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def row_hash(t: Table, key_cols: Sequence[str]) -> np.ndarray:
    """64-bit hash of each row's key tuple.

    FNV-1a over the key-tuple bytes, then the splitmix64 finalizer.  Each field
    contributes a tag byte (0 null, 1 valid) and, when valid, its little-endian
    value bytes; Utf8 values are preceded by their u64 byte length.  Floats are
    canonicalised so -0.0 and 0.0 (and all NaNs) hash alike.
    """
    n = t.num_rows
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for name in key_cols:
            col = t[name]
            valid = col.is_valid()
            h = _fnv_bytes(h, valid.astype(np.uint8).reshape(n, 1))
            if col.dtype is DataType.UTF8:
                lens = np.diff(col.offsets)
                h = _fnv_bytes(h, lens.astype("<u8").view(np.uint8).reshape(n, 8), valid)
                width = int(lens.max()) if n else 0
                if width:
                    pad = np.zeros((n, width), dtype=np.uint8)
                    live = np.arange(width) < lens[:, None]
                    pad[live] = col.data
                    h = _fnv_bytes(h, pad, valid[:, None] & live)
                continue
            data = col.data
            if col.dtype is DataType.FLOAT64:
                data = np.where(np.isnan(data), np.nan, data + 0.0)
            raw = np.ascontiguousarray(data, dtype=col.dtype.numpy).view(np.uint8).reshape(n, col.dtype.width)
            h = _fnv_bytes(h, raw, valid)
        return _splitmix64(h)


def hash_partition(t: Table, key_cols: Sequence[str], P: int) -> PartitionAssignment:
    key_cols = list(key_cols)
    if not key_cols:
        raise ValueError("hash_partition needs at least one key column")
    if P < 1:
        raise ValueError("P must be >= 1")
    for k in key_cols:
        t.schema.index(k)
    if P == 1:
        return PartitionAssignment(np.zeros(t.num_rows, dtype=np.int64), 1)
    return PartitionAssignment((row_hash(t, key_cols) % np.uint64(P)).astype(np.int64), P)


# -- range partitioning -----------------------------------------------------

def _valid_values(key: Column) -> np.ndarray:
    return key.data[key.is_valid()]


def range_partition_bounds(ctx: WorkerContext, key: Column, P: int | None = None,
                           bins: int = DEFAULT_BINS) -> RangeBounds:
    """Pivots at global histogram quantiles of a numeric key (collective).

    Global min/max come from two allreduces, then bin counts from a third and,
    unless the bins are already exact, a refinement pass inside the bins that
    hold a quantile.  Integer keys use integer-width bins, so with fewer
    distinct values than bins the pivots are exact order statistics.
    """
    P = P or ctx.world_size
    if not key.dtype.is_numeric:
        raise TypeError(f"histogram range partition needs a numeric key, got {key.dtype.name}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    is_int = key.dtype is DataType.INT64
    with ctx.stage("sample", compute=True):
        vals = _valid_values(key)
        hi_id = np.iinfo(np.int64).max if is_int else np.inf
        lo_id = np.iinfo(np.int64).min if is_int else -np.inf
        local_lo = vals.min() if vals.size else hi_id
        local_hi = vals.max() if vals.size else lo_id
    with ctx.stage("allreduce-range"):
        lo = allreduce(ctx, [local_lo], ReduceOp.MIN)[0]
        hi = allreduce(ctx, [local_hi], ReduceOp.MAX)[0]
    if lo > hi:
        raise NoKeyValuesError("range partition over an all-null key column")
    with ctx.stage("binning"):
        if is_int:
            lo, hi = int(lo), int(hi)
            width = max(1, math.ceil((hi - lo + 1) / bins))
            nbins = (hi - lo) // width + 1
        else:
            lo, hi = float(lo), float(hi)
            width = (hi - lo) / bins
            nbins = bins if width > 0 else 1
        local_bins = _bin_of(vals, lo, width, nbins, is_int)
        counts = allreduce(ctx, np.bincount(local_bins, minlength=nbins), ReduceOp.SUM)
        targets = _targets(counts, P)
        pivots = [_interpolate(lo + b * width, width, counts[b], r, is_int) for b, r in targets]
        if width > (1 if is_int else 0) and P > 1:
            pivots = _refine(ctx, vals, local_bins, targets, lo, width, bins, is_int)
        pivots = [min(max(v, lo), hi) for v in pivots]
    col = Column.from_numpy(np.asarray(pivots, dtype=key.dtype.numpy))
    return RangeBounds(col, lo, hi)


def _bin_of(vals: np.ndarray, lo, width, nbins: int, is_int: bool) -> np.ndarray:
    if is_int:
        return ((vals - lo) // width).astype(np.int64)
    if width <= 0:
        return np.zeros(vals.size, np.int64)
    return np.minimum(((vals - lo) / width).astype(np.int64), nbins - 1)


def _targets(counts: np.ndarray, P: int) -> list[tuple[int, int]]:
    """For each of the P-1 quantile ranks, its bin and the rank left over inside it."""
    total = int(counts.sum())
    cum = np.concatenate([[0], np.cumsum(counts)])
    out = []
    for i in range(1, P):
        q = (i * total) // P
        b = min(int(np.searchsorted(cum, q, side="right") - 1), len(counts) - 1)
        out.append((b, q - int(cum[b])))
    return out


def _interpolate(start, width, count, remainder, is_int: bool):
    inside = remainder / count if count else 0.0
    if is_int:
        return start + math.floor(width * inside)
    return start + width * inside


def _refine(ctx: WorkerContext, vals, local_bins, targets, lo, width, bins: int, is_int: bool) -> list:
    """Second histogram pass inside just the bins holding a quantile.

    One coarse pass leaves skewed data badly split when most rows share a
    few wide bins; re-binning those bins shrinks the error by a factor of
    ``bins`` for one more allreduce.
    """
    chosen = sorted({b for b, _ in targets})
    if is_int:
        sub_w = max(1, math.ceil(width / bins))
        sub_n = (width - 1) // sub_w + 1
    else:
        sub_w, sub_n = width / bins, bins
    local = np.zeros((len(chosen), sub_n), dtype=np.int64)
    for j, b in enumerate(chosen):
        inner = vals[local_bins == b]
        local[j] = np.bincount(_bin_of(inner, lo + b * width, sub_w, sub_n, is_int), minlength=sub_n)[:sub_n]
    sub = allreduce(ctx, local.reshape(-1), ReduceOp.SUM).reshape(len(chosen), sub_n)
    out = []
    for b, r in targets:
        counts = sub[chosen.index(b)]
        cum = np.concatenate([[0], np.cumsum(counts)])
        sb = min(int(np.searchsorted(cum, r, side="right") - 1), sub_n - 1)
        out.append(_interpolate(lo + b * width + sb * sub_w, sub_w, counts[sb], r - int(cum[sb]), is_int))
    return out


def assign_by_range(key: Column, bounds: RangeBounds) -> PartitionAssignment:
    """Row goes to the smallest r with key <= pivot[r]; nulls sort first."""
    piv = bounds.pivots
    P = bounds.P
    valid = key.is_valid()
    pvalid = piv.is_valid()
    null_pivots = int((~pvalid).sum())
    if key.dtype is DataType.UTF8:
        pv = np.array([v for v in piv.to_pylist() if v is not None], dtype=object)
        kv = np.array(["" if v is None else v for v in key.to_pylist()], dtype=object)
    else:
        pv = piv.data[pvalid]
        kv = key.data
    dest = np.searchsorted(pv, kv, side="left") + null_pivots if len(kv) else np.zeros(0, np.int64)
    dest = np.where(valid, dest, 0).astype(np.int64)
    return PartitionAssignment(dest, P)


def sample_pivots(ctx: WorkerContext, locally_sorted_key: Column, sample_size: int | None = None) -> RangeBounds:
    """Regular sampling: every ceil(n/s)-th local key goes to rank 0, which
    picks P-1 evenly spaced pivots from the sorted samples and broadcasts them."""
    P = ctx.world_size
    s = P if sample_size is None else sample_size
    if s < P - 1:
        raise ValueError(f"sample_size {s} smaller than P-1 = {P - 1}")
    n = locally_sorted_key.length
    with ctx.stage("sample", compute=True):
        step = math.ceil(n / s) if s else n + 1
        idx = np.arange(0, n, step) if n and s else np.empty(0, np.int64)
        samples = Table(Schema.of(("key", locally_sorted_key.dtype)), (locally_sorted_key.take(idx),))
    with ctx.stage("gather-samples"):
        gathered = gather_table(ctx, samples, 0)
    piv = None
    with ctx.stage("calc-pivots", compute=True):
        if ctx.rank == 0:
            ordered = take_rows(gathered, sort_indices(gathered))
            m = ordered.num_rows
            pos = [(i * m) // P for i in range(1, P)]
            piv = take_rows(ordered, pos) if m else Table(ordered.schema, (
                ordered["key"].take(np.full(P - 1, -1)),))
    with ctx.stage("bcast-pivots"):
        piv = broadcast_table(ctx, piv, 0)
    col = piv["key"]
    vals = [v for v in col.to_pylist() if v is not None]
    return RangeBounds(col, vals[0] if vals else None, vals[-1] if vals else None)


# -- split / rebalance ------------------------------------------------------

def split(t: Table, a: PartitionAssignment) -> list[Table]:
    if len(a) != t.num_rows:
        raise ValueError(f"assignment covers {len(a)} rows, table has {t.num_rows}")
    return split_rows(t, a.dest, a.P)


def rebalance(ctx: WorkerContext, t: Table) -> Table:
    """Even out partition sizes (floor/ceil of N/P) keeping rank-major row order."""
    P = ctx.world_size
    counts = allgather_counts(ctx, t.num_rows)
    N = int(counts.sum())
    start = int(counts[:ctx.rank].sum())
    sizes = np.full(P, N // P, dtype=np.int64)
    sizes[: N % P] += 1
    target_start = np.concatenate([[0], np.cumsum(sizes)])[:-1]
    g = start + np.arange(t.num_rows)
    dest = np.searchsorted(target_start, g, side="right") - 1
    return shuffle_table(ctx, t, dest)
