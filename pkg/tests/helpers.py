"""Random tables, partitioning and result collection shared by the tests."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from ddf.columnar import Column, DataType, Schema, Table, concat_tables, take_rows

WORDS = ["", "a", "b", "ab", "ba", "x,y", 'q"t', "é", "line\nbreak", "zz"]


def nullable(rng: np.random.Generator, values: list, null_rate: float) -> list:
    mask = rng.random(len(values)) < null_rate
    return [None if m else v for v, m in zip(values, mask)]


def random_table(rng: np.random.Generator, n: int, *, key: str = "int", key_range: int = 10,
                 null_rate: float = 0.1, names=("k", "v", "f")) -> Table:
    """Key column (int or utf8), an Int64 value column and a Float64 column."""
    if key == "int":
        kd, kv = DataType.INT64, rng.integers(0, key_range, n).tolist()
    else:
        kd, kv = DataType.UTF8, [WORDS[i % len(WORDS)] + str(i // len(WORDS))
                                 for i in rng.integers(0, key_range, n).tolist()]
    cols = {
        names[0]: (kd, nullable(rng, kv, null_rate / 2)),
        names[1]: (DataType.INT64, nullable(rng, rng.integers(-1000, 1000, n).tolist(), null_rate)),
        names[2]: (DataType.FLOAT64, nullable(rng, np.round(rng.normal(size=n), 6).tolist(), null_rate)),
    }
    return Table.from_pydict({k: v for k, (_, v) in cols.items()}, {k: d for k, (d, _) in cols.items()},
                             keys=[names[0]])


def split_random(rng: np.random.Generator, t: Table, P: int) -> list[Table]:
    """Contiguous pieces of uneven (possibly zero) size."""
    cuts = np.sort(rng.integers(0, t.num_rows + 1, P - 1))
    bounds = [0, *cuts.tolist(), t.num_rows]
    return [take_rows(t, range(bounds[i], bounds[i + 1])) for i in range(P)]


def collect(results) -> Table:
    return concat_tables(list(results))


def rows(t: Table) -> list[tuple]:
    return [tuple(r) for r in t.to_pylist()]


DTYPES = [DataType.INT64, DataType.FLOAT64, DataType.BOOL, DataType.UTF8]


def value_strategy(dt: DataType):
    if dt is DataType.INT64:
        return st.integers(-(1 << 63), (1 << 63) - 1)
    if dt is DataType.FLOAT64:
        return st.floats(allow_nan=False)
    if dt is DataType.BOOL:
        return st.booleans()
    return st.text(max_size=12)


@st.composite
def tables(draw, max_rows: int = 30, max_cols: int = 4, dtypes=DTYPES):
    ncols = draw(st.integers(1, max_cols))
    names = draw(st.lists(st.text("abcdefgh_", min_size=1, max_size=6), min_size=ncols, max_size=ncols,
                          unique=True))
    types = [draw(st.sampled_from(dtypes)) for _ in range(ncols)]
    n = draw(st.integers(0, max_rows))
    cols = []
    for dt in types:
        vals = draw(st.lists(st.one_of(st.none(), value_strategy(dt)), min_size=n, max_size=n))
        cols.append(Column.from_values(dt, vals))
    return Table(Schema(tuple(names), tuple(types)), tuple(cols))
