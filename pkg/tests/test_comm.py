import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddf.columnar import DataType, SchemaError, Table, concat_tables, serialize_table, split_rows
from ddf.comm import (BufferRequest, CollectiveError, CollectiveKind, ReduceOp, TransportError,
                      allgather_table, allreduce, barrier, binomial_rounds, binomial_schedule,
                      broadcast_table, bytes_sent, channel_exchange, gather_table, reduce, run_local,
                      run_tcp, scatter_table, shuffle_table)
from ddf.partition import hash_partition

from helpers import random_table
from oracles import canon


def ints(*vals, name="k"):
    return Table.from_pydict({name: list(vals)}, {name: DataType.INT64})


def test_channel_self_buffer_stays_local():
    def fn(ctx):
        got = channel_exchange(ctx, [[BufferRequest(b"abc", 0, 0)]])
        return got, ctx.total_bytes
    [(got, sent)] = run_local(1, fn)
    assert got == [[b"abc"]] and sent == 0


def test_channel_pairwise_8_bytes():
    def fn(ctx):
        other = 1 - ctx.rank
        out = [[], []]
        out[other] = [BufferRequest(bytes([ctx.rank]) * 8, 0, other)]
        return channel_exchange(ctx, out)[other]
    assert run_local(2, fn) == [[b"\x01" * 8], [b"\x00" * 8]]


def test_buffer_request_size_must_match():
    with pytest.raises(ValueError):
        BufferRequest(b"abc", 0, 1, size=4)


def _random_matrix(seed, P):
    rng = np.random.default_rng(seed)
    # sizes[src][dst] is a list of buffer lengths
    return [[[int(x) for x in rng.integers(0, 65536, rng.integers(0, 3))] for _ in range(P)] for _ in range(P)]


def _exchange_matrix(ctx, sizes):
    out = []
    for dst in range(ctx.world_size):
        reqs = [BufferRequest(bytes([(ctx.rank * 7 + dst + i) % 251]) * n, i, dst)
                for i, n in enumerate(sizes[ctx.rank][dst])]
        out.append(reqs[::-1])  # submission order must not matter, index does
    got = channel_exchange(ctx, out)
    return [[(len(b), b[:1]) for b in bufs] for bufs in got]


@pytest.mark.parametrize("seed", range(3))
def test_channel_receives_transpose_of_sent(seed):
    P = 4
    sizes = _random_matrix(seed, P)
    got = run_local(P, _exchange_matrix, sizes)
    for dst in range(P):
        for src in range(P):
            want = [(n, bytes([(src * 7 + dst + i) % 251]) if n else b"") for i, n in enumerate(sizes[src][dst])]
            assert got[dst][src] == want


def test_channel_rejects_misplaced_request():
    def fn(ctx):
        channel_exchange(ctx, [[BufferRequest(b"x", 0, 1)], []])
    with pytest.raises(ValueError):
        run_local(2, fn)


def test_shuffle_p1_identity():
    t = ints(3, 1, 2)
    [out] = run_local(1, lambda ctx: shuffle_table(ctx, t, [0, 0, 0]))
    assert out.equals(t)


def test_shuffle_mod_two():
    parts = [ints(1, 2), ints(3, 4)]

    def fn(ctx):
        t = parts[ctx.rank]
        out = shuffle_table(ctx, t, t["k"].data % 2)
        return out["k"].to_pylist(), bytes_sent(ctx)[CollectiveKind.SHUFFLE]
    (r0, b0), (r1, b1) = run_local(2, fn)
    assert sorted(r0) == [2, 4] and sorted(r1) == [1, 3]
    # each rank sent exactly the serialized size of the one-row table it gave away
    assert b0 == sum(len(f) for f in serialize_table(ints(1)).frames())
    assert b1 == sum(len(f) for f in serialize_table(ints(4)).frames())


def test_shuffle_dest_out_of_range_fails_before_sending():
    def fn(ctx):
        try:
            shuffle_table(ctx, ints(1, 2), [0, 5])
        except ValueError:
            return ctx.total_bytes
    assert run_local(2, fn) == [0, 0]


def test_shuffle_random_colocation_and_multiset():
    P = 4
    rng = np.random.default_rng(11)
    tables = [random_table(rng, 1000, key_range=300, null_rate=0.05) for _ in range(P)]

    def fn(ctx):
        t = tables[ctx.rank]
        return shuffle_table(ctx, t, hash_partition(t, ["k"], P).dest)
    outs = run_local(P, fn)
    assert canon(r for o in outs for r in o.to_pylist()) == canon(r for t in tables for r in t.to_pylist())
    owners = {}
    for rank, o in enumerate(outs):
        for k in o["k"].to_pylist():
            assert owners.setdefault(k, rank) == rank


@given(st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=25)
def test_shuffle_arbitrary_destinations(P, seed):
    rng = np.random.default_rng(seed)
    tables = [random_table(rng, int(rng.integers(0, 40)), key_range=20) for _ in range(P)]
    dests = [rng.integers(0, P, t.num_rows) for t in tables]

    def fn(ctx):
        return shuffle_table(ctx, tables[ctx.rank], dests[ctx.rank])
    outs = run_local(P, fn)
    for r in range(P):
        want = concat_tables([split_rows(tables[s], dests[s], P)[r] for s in range(P)], tables[0].schema)
        assert outs[r].equals(want)


def test_uniform_shuffle_bytes_near_p_minus_one_over_p():
    P = 4
    rng = np.random.default_rng(5)
    tables = [random_table(rng, 5000, key_range=10**9, null_rate=0.0) for _ in range(P)]

    def fn(ctx):
        t = tables[ctx.rank]
        shuffle_table(ctx, t, hash_partition(t, ["k"], P).dest)
        return ctx.total_bytes
    sent = sum(run_local(P, fn))
    total = sum(sum(len(f) for f in serialize_table(t).frames()) for t in tables)
    expect = (P - 1) / P * total
    assert abs(sent - expect) / expect < 0.10


def test_gather_p1_and_rank_order():
    [g] = run_local(1, lambda ctx: gather_table(ctx, ints(5), 0))
    assert g["k"].to_pylist() == [5]
    outs = run_local(3, lambda ctx: gather_table(ctx, ints(ctx.rank * 10), 0))
    assert outs[0]["k"].to_pylist() == [0, 10, 20]
    assert outs[1] is None and outs[2] is None


def test_gather_invalid_root():
    with pytest.raises(ValueError):
        run_local(2, lambda ctx: gather_table(ctx, ints(1), 2))
    with pytest.raises(ValueError):
        run_local(2, lambda ctx: broadcast_table(ctx, ints(1), -1))


def test_gather_random_is_concat():
    rng = np.random.default_rng(2)
    parts = [random_table(rng, int(rng.integers(0, 50))) for _ in range(4)]
    outs = run_local(4, lambda ctx: gather_table(ctx, parts[ctx.rank], 2))
    assert outs[2].equals(concat_tables(parts))
    assert all(outs[r] is None for r in (0, 1, 3))


def test_allgather_examples():
    [one] = run_local(1, lambda ctx: allgather_table(ctx, ints(9)))
    assert one["k"].to_pylist() == [9]
    outs = run_local(2, lambda ctx: allgather_table(ctx, ints(ctx.rank)))
    assert [o["k"].to_pylist() for o in outs] == [[0, 1], [0, 1]]


def test_allgather_equals_gather_then_broadcast_for_any_root():
    rng = np.random.default_rng(4)
    P = 4
    parts = [random_table(rng, int(rng.integers(0, 30))) for _ in range(P)]

    def fn(ctx):
        t = parts[ctx.rank]
        ag = allgather_table(ctx, t)
        composed = [broadcast_table(ctx, gather_table(ctx, t, root), root) for root in range(P)]
        return ag, composed
    outs = run_local(P, fn)
    for ag, composed in outs:
        assert ag.equals(outs[0][0])
        assert all(c.equals(ag) for c in composed)


def test_allgather_schema_mismatch_raises_everywhere():
    def fn(ctx):
        try:
            allgather_table(ctx, ints(1, name="a" if ctx.rank else "b"))
        except SchemaError:
            return "schema"
    assert run_local(3, fn) == ["schema"] * 3


def test_broadcast_examples():
    t = ints(7, 8)
    [b] = run_local(1, lambda ctx: broadcast_table(ctx, t, 0))
    assert b.equals(t)
    outs = run_local(4, lambda ctx: broadcast_table(ctx, t if ctx.rank == 0 else None, 0))
    assert all(o.equals(t) for o in outs)
    assert binomial_rounds(8) == 3
    assert len(binomial_schedule(8)) == 3


@pytest.mark.parametrize("P", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("root", [0, 1])
def test_binomial_schedule_reaches_every_rank_once(P, root):
    root %= P
    have = {root}
    for pairs in binomial_schedule(P, root):
        assert all(s in have for s, _ in pairs)
        dsts = [d for _, d in pairs]
        assert len(set(dsts)) == len(dsts) and not have & set(dsts)
        have |= set(dsts)
    assert have == set(range(P))


def test_broadcast_then_allreduce_indicator_is_p():
    def fn(ctx):
        t = broadcast_table(ctx, ints(1, 2) if ctx.rank == 3 else None, 3)
        return allreduce(ctx, [int(t.num_rows == 2)], ReduceOp.SUM)[0]
    assert run_local(5, fn) == [5] * 5


def test_scatter():
    parts = [ints(r) for r in range(3)]
    outs = run_local(3, lambda ctx: scatter_table(ctx, parts if ctx.rank == 1 else None, 1))
    assert [o["k"].to_pylist() for o in outs] == [[0], [1], [2]]


def test_allreduce_examples():
    assert run_local(4, lambda ctx: allreduce(ctx, ctx.rank + 1, ReduceOp.SUM).tolist()) == [[10]] * 4
    data = [[3, 9], [5, 2]]
    assert run_local(2, lambda ctx: allreduce(ctx, data[ctx.rank], ReduceOp.MIN).tolist()) == [[3, 2]] * 2
    assert run_local(3, lambda ctx: allreduce(ctx, [ctx.rank], ReduceOp.MAX).tolist()) == [[2]] * 3
    assert run_local(3, lambda ctx: allreduce(ctx, [1], ReduceOp.COUNT).tolist()) == [[3]] * 3


def test_allreduce_float_matches_serial_fold():
    rng = np.random.default_rng(8)
    P = 6
    arrs = [rng.normal(size=100) * 10.0 ** rng.integers(-3, 3) for _ in range(P)]
    outs = run_local(P, lambda ctx: allreduce(ctx, arrs[ctx.rank], ReduceOp.SUM))
    want = np.array([sum(float(a[i]) for a in arrs) for i in range(100)])
    for o in outs:
        assert np.array_equal(o, outs[0])
        np.testing.assert_allclose(o, want, rtol=1e-12, atol=1e-12)


def test_allreduce_length_mismatch_raises_on_every_rank():
    def fn(ctx):
        try:
            allreduce(ctx, [1] * (2 + (ctx.rank == 2)), ReduceOp.SUM)
        except CollectiveError:
            return "err"
    assert run_local(4, fn) == ["err"] * 4


def test_allreduce_rejects_non_numeric():
    with pytest.raises(TypeError):
        run_local(1, lambda ctx: allreduce(ctx, ["a"], ReduceOp.SUM))


def test_reduce_to_root():
    outs = run_local(3, lambda ctx: reduce(ctx, [ctx.rank, 1], ReduceOp.SUM, root=1))
    assert outs[0] is None and outs[2] is None and outs[1].tolist() == [3, 3]


def test_barrier_p1_is_noop():
    run_local(1, lambda ctx: barrier(ctx))


def test_barrier_waits_for_last_entry():
    delays = [0.0, 0.05, 0.2, 0.1]

    def fn(ctx):
        time.sleep(delays[ctx.rank])
        enter = time.perf_counter()
        barrier(ctx)
        return enter, time.perf_counter()
    stamps = run_local(4, fn)
    last_entry = max(e for e, _ in stamps)
    assert all(x >= last_entry for _, x in stamps)


def test_repeated_barriers():
    run_local(5, lambda ctx: [barrier(ctx) for _ in range(20)])


def test_byte_counters_p1_and_reset():
    def fn(ctx):
        shuffle_table(ctx, ints(1, 2, 3), [0, 0, 0])
        return ctx.total_bytes
    assert run_local(1, fn) == [0]

    def fn2(ctx):
        allgather_table(ctx, ints(ctx.rank))
        before = ctx.total_bytes
        ctx.reset_counters()
        return before, bytes_sent(ctx)
    for before, after in run_local(2, fn2):
        assert all(v == 0 for v in after.values())
    assert sum(b for b, _ in run_local(2, fn2)) > 0


def test_counters_charge_outermost_kind():
    def fn(ctx):
        allgather_table(ctx, ints(ctx.rank))
        return bytes_sent(ctx)
    for c in run_local(3, fn):
        assert c[CollectiveKind.GATHER] == 0 and c[CollectiveKind.BROADCAST] == 0
    one_row = sum(len(f) for f in serialize_table(ints(0)).frames())
    assert run_local(3, fn)[1][CollectiveKind.ALLGATHER] == one_row


def _run_schedule(ctx, ops, seed):
    rng = np.random.default_rng([seed, ctx.rank])
    log = []
    for op, root in ops:
        t = ints(*rng.integers(0, 9, rng.integers(0, 4)).tolist())
        if op == "shuffle":
            out = shuffle_table(ctx, t, rng.integers(0, ctx.world_size, t.num_rows))
            log.append(allreduce(ctx, [out.num_rows], ReduceOp.SUM)[0])
        elif op == "gather":
            gather_table(ctx, t, root)
        elif op == "allgather":
            log.append(allgather_table(ctx, t).num_rows)
        elif op == "bcast":
            log.append(broadcast_table(ctx, t, root).num_rows)
        elif op == "allreduce":
            log.append(int(allreduce(ctx, [t.num_rows], ReduceOp.SUM)[0]))
        else:
            barrier(ctx)
    return log


@given(st.integers(1, 8),
       st.lists(st.tuples(st.sampled_from(["shuffle", "gather", "allgather", "bcast", "allreduce", "barrier"]),
                          st.integers(0, 7)), max_size=12),
       st.integers(0, 1000))
@settings(max_examples=30)
def test_random_matched_schedules_complete(P, ops, seed):
    ops = [(op, root % P) for op, root in ops]
    logs = run_local(P, _run_schedule, ops, seed, timeout=20)
    assert all(log == logs[0] for log in logs)


def test_worker_error_propagates():
    def fn(ctx):
        if ctx.rank == 1:
            raise KeyError("boom")
        barrier(ctx)
    with pytest.raises(KeyError):
        run_local(3, fn, timeout=5)


def _tcp_round(ctx):
    t = ints(*range(ctx.rank * 10, ctx.rank * 10 + 10))
    out = shuffle_table(ctx, t, t["k"].data % ctx.world_size)
    g = allgather_table(ctx, ints(ctx.rank))
    s = allreduce(ctx, [1.5], ReduceOp.SUM)
    barrier(ctx)
    return sorted(out["k"].to_pylist()), g["k"].to_pylist(), s.tolist(), ctx.total_bytes


@pytest.mark.parametrize("P", [2, 3])
def test_tcp_matches_local(P):
    assert run_tcp(P, _tcp_round, timeout=20) == run_local(P, _tcp_round)


def _tcp_fail(ctx):
    if ctx.rank == 1:
        raise ValueError("bad input on rank 1")
    barrier(ctx)


def test_tcp_error_is_root_cause():
    with pytest.raises(ValueError, match="rank 1"):
        run_tcp(3, _tcp_fail, timeout=5)


def test_local_timeout_is_transport_error():
    def fn(ctx):
        if ctx.rank == 0:
            ctx.recv_frames(1)
    with pytest.raises(TransportError):
        run_local(2, fn, timeout=0.3)
