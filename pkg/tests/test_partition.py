import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddf.columnar import Column, DataType, Table, concat_tables
from ddf.comm import CollectiveKind, bytes_sent, run_local, shuffle_table
from ddf.partition import (PartitionAssignment, RangeBounds, assign_by_range, hash_partition,
                           range_partition_bounds, rebalance, row_hash, sample_pivots, split)

from helpers import random_table, split_random, tables

M64 = (1 << 64) - 1


def py_row_hash(row, dtypes):
    """Byte-at-a-time reference for the documented key hash."""
    h = 0xCBF29CE484222325
    buf = bytearray()
    for v, dt in zip(row, dtypes):
        buf.append(0 if v is None else 1)
        if v is None:
            continue
        if dt is DataType.UTF8:
            b = v.encode()
            buf += struct.pack("<Q", len(b)) + b
        elif dt is DataType.FLOAT64:
            buf += struct.pack("<d", float("nan") if math.isnan(v) else v + 0.0)
        elif dt is DataType.BOOL:
            buf.append(int(v))
        else:
            buf += struct.pack("<q", v)
    for byte in buf:
        h = ((h ^ byte) * 0x100000001B3) & M64
    z = h
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def keyed(vals, dt=DataType.INT64):
    return Table.from_pydict({"k": list(vals)}, {"k": dt}, keys=["k"])


def test_hash_frozen_values():
    t = Table.from_pydict({"a": [0, 1, None, -7], "s": ["", "x", None, "héllo"]},
                          {"a": DataType.INT64, "s": DataType.UTF8})
    got = row_hash(t, ["a", "s"]).tolist()
    want = [py_row_hash(r, [DataType.INT64, DataType.UTF8]) for r in t.to_pylist()]
    assert got == want
    # frozen so any platform or refactor drift shows up
    assert row_hash(keyed([0, 1, None]), ["k"]).tolist() == [
        3157854246557864315, 6717884494356754681, 2737183428366584608]
    assert got[2] == py_row_hash((None, None), [DataType.INT64, DataType.UTF8])


@given(tables(max_cols=3))
def test_hash_matches_bytewise_reference(t):
    names = list(t.schema.names)
    got = row_hash(t, names).tolist()
    assert got == [py_row_hash(r, t.schema.dtypes) for r in t.to_pylist()]


def test_hash_null_differs_from_zero_and_signed_zero_agrees():
    h = row_hash(keyed([None, 0]), ["k"])
    assert h[0] != h[1]
    f = row_hash(keyed([0.0, -0.0], DataType.FLOAT64), ["k"])
    assert f[0] == f[1]


def test_hash_partition_examples():
    rng = np.random.default_rng(1)
    t = random_table(rng, 200)
    assert hash_partition(t, ["k"], 1).dest.tolist() == [0] * 200
    assert len(set(hash_partition(keyed([42] * 50), ["k"], 4).dest.tolist())) == 1
    with pytest.raises(ValueError):
        hash_partition(t, [], 4)


def test_hash_partition_colocates_keys():
    rng = np.random.default_rng(2)
    t = random_table(rng, 2000, key_range=100)
    a = hash_partition(t, ["k"], 4)
    seen = {}
    for k, d in zip(t["k"].to_pylist(), a.dest.tolist()):
        assert seen.setdefault(k, d) == d
    assert set(a.dest.tolist()) == {0, 1, 2, 3}
    assert np.array_equal(hash_partition(t, ["k"], 4).dest, a.dest)


def test_assignment_range_checked():
    with pytest.raises(ValueError):
        PartitionAssignment(np.array([0, 3]), 3)


def _bounds(P, parts, bins=256):
    return run_local(P, lambda ctx: range_partition_bounds(ctx, parts[ctx.rank], P, bins))


def test_range_bounds_uniform_quantiles():
    vals = np.arange(100)
    parts = [Column.from_numpy(p) for p in np.array_split(vals, 4)]
    outs = _bounds(4, parts)
    for b in outs:
        assert b.pivots.to_pylist() == [25, 50, 75]
        assert (b.min, b.max) == (0, 99)


def test_range_bounds_constant_column():
    parts = [Column.from_numpy(np.full(10, 5)) for _ in range(3)]
    b = _bounds(3, parts)[0]
    assert b.pivots.to_pylist() == [5, 5]
    assert assign_by_range(parts[0], b).dest.tolist() == [0] * 10


def test_range_bounds_all_null_is_error():
    col = Column.from_values(DataType.INT64, [None, None])
    with pytest.raises(ValueError):
        _bounds(2, [col, col])


def test_range_bounds_lognormal_balanced():
    rng = np.random.default_rng(9)
    P, n = 8, 40_000
    vals = rng.lognormal(0.0, 1.5, n)
    parts = [Column.from_numpy(p) for p in np.array_split(vals, P)]
    b = _bounds(P, parts)[0]
    counts = np.bincount(assign_by_range(Column.from_numpy(vals), b).dest, minlength=P)
    assert np.all(np.abs(counts - n / P) <= 0.25 * n / P)


def test_range_bounds_identical_and_ordered():
    rng = np.random.default_rng(3)
    parts = [Column.from_numpy(rng.integers(-1000, 1000, int(rng.integers(0, 300)))) for _ in range(5)]
    outs = _bounds(5, parts, bins=16)
    piv = outs[0].pivots.to_pylist()
    assert all(o.pivots.to_pylist() == piv for o in outs)
    assert piv == sorted(piv)
    assert all(outs[0].min <= p <= outs[0].max for p in piv)


def test_assign_by_range_ties_and_edges():
    b = RangeBounds(Column.from_numpy(np.array([10, 20])), 0, 30)
    key = Column.from_values(DataType.INT64, [-5, 10, 11, 20, 21, None])
    assert assign_by_range(key, b).dest.tolist() == [0, 0, 1, 1, 2, 0]


@given(st.lists(st.integers(-50, 50), max_size=60), st.lists(st.integers(-50, 50), min_size=0, max_size=6))
def test_assign_by_range_is_monotone(keys, pivots):
    b = RangeBounds(Column.from_numpy(np.array(sorted(pivots), dtype=np.int64)))
    ks = sorted(keys)
    dest = assign_by_range(Column.from_numpy(np.array(ks, dtype=np.int64)), b).dest.tolist()
    assert dest == sorted(dest)
    for k, d in zip(ks, dest):
        # smallest rank whose pivot is >= key
        assert d == next((i for i, p in enumerate(sorted(pivots)) if k <= p), len(pivots))


def test_range_partitions_concat_to_global_sort():
    rng = np.random.default_rng(4)
    P = 4
    parts = [Column.from_numpy(rng.integers(0, 500, 250)) for _ in range(P)]

    def fn(ctx):
        col = parts[ctx.rank]
        b = range_partition_bounds(ctx, col, P, bins=32)
        t = Table.from_pydict({"k": col.to_pylist()}, {"k": DataType.INT64})
        out = shuffle_table(ctx, t, assign_by_range(col, b).dest)
        return sorted(out["k"].to_pylist())
    outs = run_local(P, fn)
    assert [v for o in outs for v in o] == sorted(v for c in parts for v in c.to_pylist())


def test_sample_pivots_p1_empty():
    [b] = run_local(1, lambda ctx: sample_pivots(ctx, Column.from_numpy(np.arange(5))))
    assert b.pivots.length == 0


def test_sample_pivots_two_halves():
    parts = [np.array([1, 2, 3, 4]), np.array([5, 6, 7, 8])]
    outs = run_local(2, lambda ctx: sample_pivots(ctx, Column.from_numpy(parts[ctx.rank]), 2))
    # gathered samples are [1, 3, 5, 7]; the median position picks 5
    for b in outs:
        [p] = b.pivots.to_pylist()
        assert 4 <= p <= 5
    keys = Column.from_numpy(np.arange(1, 9))
    assert assign_by_range(keys, outs[0]).dest.tolist() == [0, 0, 0, 0, 0, 1, 1, 1]


def test_sample_pivots_all_equal():
    outs = run_local(3, lambda ctx: sample_pivots(ctx, Column.from_numpy(np.full(6, 7)), 3))
    assert outs[0].pivots.to_pylist() == [7, 7]


def test_sample_pivots_too_few_samples():
    with pytest.raises(ValueError):
        run_local(4, lambda ctx: sample_pivots(ctx, Column.from_numpy(np.arange(5)), 2))


def test_sample_pivots_identical_on_all_ranks():
    rng = np.random.default_rng(5)
    parts = [np.sort(rng.integers(0, 100, int(rng.integers(0, 40)))) for _ in range(4)]
    outs = run_local(4, lambda ctx: sample_pivots(ctx, Column.from_numpy(parts[ctx.rank]), 8))
    assert all(o.pivots.to_pylist() == outs[0].pivots.to_pylist() for o in outs)
    assert outs[0].pivots.to_pylist() == sorted(outs[0].pivots.to_pylist())


def test_split_examples():
    t = keyed([1, 2, 3, 4])
    [whole] = split(t, PartitionAssignment(np.zeros(4), 1))
    assert whole.equals(t)
    a, b = split(t, PartitionAssignment(np.array([0, 1, 0, 1]), 2))
    assert a["k"].to_pylist() == [1, 3] and b["k"].to_pylist() == [2, 4]
    with pytest.raises(ValueError):
        split(t, PartitionAssignment(np.zeros(3), 1))


@given(tables(), st.integers(1, 6), st.randoms(use_true_random=False))
def test_split_inverse_permutation(t, P, rnd):
    dest = np.array([rnd.randrange(P) for _ in range(t.num_rows)], dtype=np.int64)
    parts = split(t, PartitionAssignment(dest, P))
    rows = [None] * t.num_rows
    for r, part in enumerate(parts):
        idx = np.flatnonzero(dest == r)
        assert part.num_rows == idx.size
        for i, row in zip(idx, part.to_pylist()):
            rows[i] = row
    assert rows == t.to_pylist()


def test_rebalance_examples():
    def fn(ctx, sizes):
        t = keyed(range(sum(sizes[:ctx.rank]), sum(sizes[:ctx.rank + 1])))
        out = rebalance(ctx, t)
        return out["k"].to_pylist(), bytes_sent(ctx)[CollectiveKind.SHUFFLE]
    balanced = run_local(2, fn, [3, 3])
    assert [b for _, b in balanced] == [0, 0]
    outs = run_local(2, fn, [4, 0])
    assert [r for r, _ in outs] == [[0, 1], [2, 3]]


@given(st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=25)
def test_rebalance_sizes_and_order(P, seed):
    rng = np.random.default_rng(seed)
    whole = random_table(rng, int(rng.integers(0, 80)))
    parts = split_random(rng, whole, P)
    outs = run_local(P, lambda ctx: rebalance(ctx, parts[ctx.rank]))
    sizes = [o.num_rows for o in outs]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)
    assert concat_tables(outs, whole.schema).equals(whole)
