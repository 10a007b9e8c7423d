import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddf.columnar import (Column, DataType, DecodeError, Schema, SchemaError, SerializedTable, Table,
                          canonical_sort, concat_tables, deserialize_table, pack_validity,
                          serialize_table, split_rows, take_rows, unpack_validity)

from helpers import tables
from oracles import canon


def int_table(*vals, name="k"):
    return Table.from_pydict({name: list(vals)}, {name: DataType.INT64})


def test_validity_bitmap_is_lsb_first():
    bits = pack_validity(np.array([True, False, True, True, False, False, False, False, True]))
    assert bits.tolist() == [0b00001101, 0b00000001]
    assert pack_validity(np.ones(5, bool)) is None
    assert unpack_validity(bits, 9).tolist() == [True, False, True, True, False, False, False, False, True]


def test_utf8_offsets_and_nulls():
    c = Column.from_values(DataType.UTF8, ["ab", None, "", "é"])
    assert c.offsets.tolist() == [0, 2, 2, 2, 4]
    assert c.to_pylist() == ["ab", None, "", "é"]
    assert c.null_count == 1


def test_fixed_width_buffer_sizes():
    for dt, v in [(DataType.INT64, 1), (DataType.FLOAT64, 1.5), (DataType.BOOL, True)]:
        c = Column.from_values(dt, [v] * 5)
        assert len(c.data.tobytes()) == 5 * dt.width
        assert c.offsets is None


def test_bad_column_rejected():
    with pytest.raises(ValueError):
        Column(DataType.UTF8, 2, np.zeros(3, np.uint8), None, np.array([0, 2, 1]))
    with pytest.raises(ValueError):
        Column(DataType.INT64, 3, np.zeros(2, np.int64))


def test_schema_rules():
    with pytest.raises(SchemaError):
        Schema(("a", "a"), (DataType.INT64, DataType.INT64))
    with pytest.raises((SchemaError, ValueError)):
        Schema(("a",), (DataType.INT64,), (3,))
    with pytest.raises(KeyError):
        Schema.of(("a", DataType.INT64)).index("b")


def test_serialize_empty_table():
    t = Table.empty(Schema.of(("k", DataType.INT64)))
    s = serialize_table(t)
    assert struct.unpack_from("<IQ", s.header, 4) == (1, 0)
    assert [len(b) for b in s.buffers] == [0]
    assert deserialize_table(s).equals(t)


def test_serialize_three_ints_is_one_24_byte_buffer():
    s = serialize_table(int_table(1, 2, 3))
    assert [len(b) for b in s.buffers] == [24]
    assert s.header[:4] == b"DDF1"
    # header layout: magic, u32 ncols, u64 nrows, tag, flags, u16 namelen, name, u64 sizes
    assert s.header == b"DDF1" + struct.pack("<IQ", 1, 3) + struct.pack("<BBH", 0, 0, 1) + b"k" + struct.pack("<Q", 24)


def test_buffer_order_validity_offsets_data():
    t = Table.from_pydict({"s": ["x", None, "yz"]}, {"s": DataType.UTF8})
    s = serialize_table(t)
    assert [len(b) for b in s.buffers] == [1, 32, 3]


def test_header_size_mismatch_is_decode_error():
    s = serialize_table(int_table(1, 2, 3))
    with pytest.raises(DecodeError):
        deserialize_table(SerializedTable(s.header, [s.buffers[0][:16]]))


@pytest.mark.parametrize("mutate", [
    lambda h: b"XXXX" + h[4:],
    lambda h: h[:16] + bytes([9]) + h[17:],
    lambda h: h[:-3],
    lambda h: h + b"\0",
])
def test_malformed_header(mutate):
    s = serialize_table(int_table(1, 2, 3))
    with pytest.raises(DecodeError):
        deserialize_table(SerializedTable(mutate(s.header), s.buffers))


def test_wrong_buffer_count():
    s = serialize_table(int_table(1))
    with pytest.raises(DecodeError):
        deserialize_table(SerializedTable(s.header, s.buffers + [b""]))


def test_random_mixed_table_round_trip():
    rng = np.random.default_rng(7)
    n = 1000
    t = Table.from_pydict({
        "i": [None if x < 0.1 else int(v) for x, v in zip(rng.random(n), rng.integers(-9, 9, n))],
        "f": rng.normal(size=n).tolist(),
        "b": (rng.random(n) < 0.5).tolist(),
        "s": ["".join("abc"[j] for j in rng.integers(0, 3, k)) for k in rng.integers(0, 6, n)],
    }, {"i": DataType.INT64, "f": DataType.FLOAT64, "b": DataType.BOOL, "s": DataType.UTF8}, keys=["s"])
    back = deserialize_table(serialize_table(t))
    assert back.equals(t)
    assert back.schema.key_indices == (3,)


@given(tables())
def test_round_trip_property(t):
    s = serialize_table(t)
    back = deserialize_table(SerializedTable.from_frames(s.frames()))
    assert back.equals(t)
    assert back.to_pylist() == t.to_pylist()


@given(tables())
def test_header_sizes_account_for_every_buffer(t):
    s = serialize_table(t)
    pos = len(s.header) - 8 * len(s.buffers)
    sizes = struct.unpack_from(f"<{len(s.buffers)}Q", s.header, pos)
    assert list(sizes) == [len(b) for b in s.buffers]


def test_concat_empty_list_keeps_schema():
    sch = Schema.of(("k", DataType.INT64))
    t = concat_tables([], sch)
    assert t.num_rows == 0 and t.schema == sch


def test_concat_in_order():
    assert concat_tables([int_table(1, 2), int_table(3)])["k"].to_pylist() == [1, 2, 3]


def test_concat_schema_mismatch():
    with pytest.raises(SchemaError):
        concat_tables([int_table(1), int_table(2, name="j")])


def test_concat_random_parts_multiset():
    rng = np.random.default_rng(3)
    parts = [int_table(*rng.integers(0, 5, rng.integers(0, 20)).tolist()) for _ in range(8)]
    got = concat_tables(parts)
    assert canon(got.to_pylist()) == canon([r for p in parts for r in p.to_pylist()])


def test_take():
    t = int_table(10, 20, 30)
    assert take_rows(t, [2, 0])["k"].to_pylist() == [30, 10]
    assert take_rows(t, []).num_rows == 0
    with pytest.raises(IndexError):
        take_rows(t, [3])
    with pytest.raises(IndexError):
        take_rows(t, [-1])


@given(tables(), st.randoms(use_true_random=False))
def test_take_permutation_then_inverse(t, rnd):
    perm = list(range(t.num_rows))
    rnd.shuffle(perm)
    inv = np.argsort(perm)
    assert take_rows(take_rows(t, perm), inv).equals(t)


@given(tables(), st.integers(1, 5), st.randoms(use_true_random=False))
def test_split_then_concat_is_a_permutation(t, parts, rnd):
    dest = np.array([rnd.randrange(parts) for _ in range(t.num_rows)], dtype=np.int64)
    pieces = split_rows(t, dest, parts)
    assert [p.num_rows for p in pieces] == np.bincount(dest, minlength=parts).tolist()
    assert canonical_sort(concat_tables(pieces, t.schema)).equals(canonical_sort(t))


def test_canonical_sort_examples():
    t = Table.from_pydict({"a": [2, 1, 2], "b": ["b", "a", "a"]}, {"a": DataType.INT64, "b": DataType.UTF8})
    assert canonical_sort(t).to_pylist() == [(1, "a"), (2, "a"), (2, "b")]
    s = canonical_sort(t)
    assert canonical_sort(s).equals(s)


def test_canonical_sort_nulls_first():
    t = Table.from_pydict({"a": [3, None, 1], "b": [None, "x", None]}, {"a": DataType.INT64, "b": DataType.UTF8})
    assert canonical_sort(t).to_pylist() == [(None, "x"), (1, None), (3, None)]


@given(tables(), st.randoms(use_true_random=False))
def test_canonical_sort_permutation_invariant(t, rnd):
    perm = list(range(t.num_rows))
    rnd.shuffle(perm)
    assert canonical_sort(take_rows(t, perm)).equals(canonical_sort(t))


@given(tables(dtypes=[DataType.UTF8]))
def test_offsets_stay_monotone(t):
    for out in (take_rows(t, list(range(t.num_rows))[::-1]), concat_tables([t, t])):
        for c in out.columns:
            assert c.offsets[0] == 0 and np.all(np.diff(c.offsets) >= 0) and c.offsets[-1] == c.data.size
