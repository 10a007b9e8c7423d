"""Synthetic tables with a controlled key cardinality."""
from __future__ import annotations

import math

import numpy as np

from ..columnar import Column, DataType, Schema, Table

DEFAULT_SCHEMA = Schema.of(("key", DataType.INT64), ("value", DataType.INT64), keys=["key"])
VALUE_RANGE = 1 << 31


def pool_size(rows: int, C: float) -> int:
    return math.ceil(rows * C - 1e-9)


def _random_column(rng: np.random.Generator, dtype: DataType, rows: int) -> Column:
    if dtype is DataType.INT64:
        return Column.from_numpy(rng.integers(0, VALUE_RANGE, rows, dtype=np.int64))
    if dtype is DataType.FLOAT64:
        return Column.from_numpy(rng.random(rows))
    if dtype is DataType.BOOL:
        return Column.from_numpy(rng.random(rows) < 0.5)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    lens = rng.integers(1, 9, rows)
    chars = letters[rng.integers(0, 26, int(lens.sum()))]
    ends = np.cumsum(lens)
    return Column.from_values(dtype, ["".join(chars[e - k:e]) for e, k in zip(ends.tolist(), lens.tolist())])


def generate_table(rows: int, C: float, seed: int, schema: Schema = DEFAULT_SCHEMA,
                   key_offset: int = 0) -> Table:
    """``rows`` rows whose key column holds exactly ``ceil(rows * C)`` distinct
    values ``key_offset + [0, pool)``; every pool value appears at least once
    and the rest are drawn uniformly from the pool, in random order.

    The key column is the schema's first key column (else its first column)
    and must be Int64; every other column is uniform random noise.
    """
    if not 0 < C <= 1:
        raise ValueError(f"cardinality C={C} outside (0, 1]")
    if rows < 0:
        raise ValueError("rows must be >= 0")
    pool = pool_size(rows, C)
    if rows and rows * C < 1 - 1e-9:
        raise ValueError(f"rows * C = {rows * C} < 1: no key values to draw")
    ki = schema.key_indices[0] if schema.key_indices else 0
    if schema.dtypes[ki] is not DataType.INT64:
        raise TypeError("the key column must be Int64")
    rng = np.random.default_rng(seed)
    keys = np.concatenate([np.arange(pool, dtype=np.int64), rng.integers(0, pool, rows - pool, dtype=np.int64)]) \
        if rows else np.empty(0, np.int64)
    keys = rng.permutation(keys) + key_offset
    cols = [Column.from_numpy(keys) if i == ki else _random_column(rng, dt, rows)
            for i, dt in enumerate(schema.dtypes)]
    return Table(schema, tuple(cols))


def generate_partition(rows: int, C: float, seed: int, rank: int, stream: int = 0,
                       schema: Schema = DEFAULT_SCHEMA) -> Table:
    """One worker's share: an independent stream per (seed, stream, rank) and a
    key pool disjoint from every other rank's, so global cardinality is C too."""
    seq = np.random.SeedSequence([seed, stream, rank])
    return generate_table(rows, C, int(seq.generate_state(1)[0]), schema, key_offset=rank * pool_size(rows, C))
