"""Partitioned CSV input and output.

Files are dealt round-robin to ranks.  Column names come from the lowest rank
holding a file, and column types are agreed globally so every rank returns the
same schema, including ranks that read nothing.
"""
from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..columnar import Column, DataType, Schema, Table
from ..comm import ReduceOp, WorkerContext, allgather_table, allreduce, broadcast_table

_DELIM = re.compile(r"[,\r\n]")
_INT = re.compile(r"[+-]?\d+\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?|inf|infinity|nan)\Z",
                    re.IGNORECASE)
_I64 = (-(1 << 63), (1 << 63) - 1)


class CsvError(ValueError):
    pass


Field = tuple[str, bool]  # (text, was quoted)


def parse_csv(text: str) -> list[list[Field]]:
    """Split RFC-4180 text into records of (value, quoted) fields."""
    rows: list[list[Field]] = []
    row: list[Field] = []
    i, n = 0, len(text)
    if n == 0:
        return rows
    while True:
        if i < n and text[i] == '"':
            parts, j = [], i + 1
            while True:
                k = text.find('"', j)
                if k < 0:
                    raise CsvError(f"unterminated quoted field in record {len(rows) + 1}")
                parts.append(text[j:k])
                if text.startswith('"', k + 1):
                    parts.append('"')
                    j = k + 2
                    continue
                i = k + 1
                break
            row.append(("".join(parts), True))
            if i < n and text[i] not in ",\r\n":
                raise CsvError(f"unexpected character after quoted field in record {len(rows) + 1}")
        else:
            m = _DELIM.search(text, i)
            k = m.start() if m else n
            val = text[i:k]
            if '"' in val:
                raise CsvError(f"bare quote in unquoted field in record {len(rows) + 1}")
            row.append((val, False))
            i = k
        if i >= n:
            rows.append(row)
            return rows
        c = text[i]
        if c == ",":
            i += 1
            continue
        i += 2 if text.startswith("\r\n", i) else 1
        rows.append(row)
        row = []
        if i >= n:
            return rows


def _quote(s: str) -> str:
    return '"' + s.replace('"', '""') + '"'


def format_csv(t: Table) -> str:
    """Header plus rows; strings always quoted, nulls as empty unquoted fields."""
    cols = []
    for name, dt in zip(t.schema.names, t.schema.dtypes):
        vals = t[name].to_pylist()
        if dt is DataType.UTF8:
            cols.append(["" if v is None else _quote(v) for v in vals])
        elif dt is DataType.BOOL:
            cols.append(["" if v is None else ("true" if v else "false") for v in vals])
        elif dt is DataType.FLOAT64:
            cols.append(["" if v is None else repr(float(v)) for v in vals])
        else:
            cols.append(["" if v is None else str(v) for v in vals])
    lines = [",".join(_quote(n) for n in t.schema.names)]
    lines.extend(",".join(r) for r in zip(*cols))
    return "\n".join(lines) + "\n"


# -- type inference -----------------------------------------------------------

def _field_flags(fields: Sequence[Field]) -> tuple[int, int, int]:
    """Whether every non-null field could be (bool, int, float)."""
    can_b = can_i = can_f = 1
    for v, q in fields:
        if q:
            return 0, 0, 0
        if v == "":
            continue
        if can_b and v not in ("true", "false"):
            can_b = 0
        if can_i and not (_INT.match(v) and _I64[0] <= int(v) <= _I64[1]):
            can_i = 0
        if can_f and not _FLOAT.match(v):
            can_f = 0
        if not (can_b or can_i or can_f):
            break
    return can_b, can_i, can_f


def _dtype_of(can_b: int, can_i: int, can_f: int) -> DataType:
    if can_i:
        return DataType.INT64
    if can_f:
        return DataType.FLOAT64
    if can_b:
        return DataType.BOOL
    return DataType.UTF8


def _convert(fields: Sequence[Field], dt: DataType) -> Column:
    def nullable(conv):
        return [None if (v == "" and not q) else conv(v) for v, q in fields]
    if dt is DataType.UTF8:
        return Column.from_values(dt, [None if (v == "" and not q) else v for v, q in fields])
    if dt is DataType.BOOL:
        return Column.from_values(dt, nullable(lambda v: v == "true"))
    if dt is DataType.INT64:
        return Column.from_values(dt, nullable(int))
    return Column.from_values(dt, nullable(float))


# -- collective read ----------------------------------------------------------

def _read_text(path) -> str:
    # newline="" keeps a bare \r inside a quoted field intact
    with open(path, encoding="utf-8", newline="") as f:
        return f.read()


def _my_files(ctx: WorkerContext, paths) -> list[str]:
    if isinstance(paths, Mapping):
        return [os.fspath(p) for p in paths.get(ctx.rank, ())]
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    return [os.fspath(p) for p in list(paths)[ctx.rank::ctx.world_size]]


def _raise_collectively(ctx: WorkerContext, err: str | None) -> None:
    """Every rank raises the lowest rank's error, or none do."""
    schema = Schema.of(("rank", DataType.INT64), ("error", DataType.UTF8))
    mine = Table.from_rows([(ctx.rank, err)], schema) if err else Table.empty(schema)
    errs = allgather_table(ctx, mine)
    if errs.num_rows:
        raise CsvError(errs["error"].to_pylist()[0])


def read_csv_partitioned(ctx: WorkerContext, paths: Sequence[str] | Mapping[int, Sequence[str]]) -> Table:
    """Collectively read CSV files; rank r parses files r, r+P, ... of a list,
    or its own entry of a rank -> files mapping."""
    files = _my_files(ctx, paths)
    header: list[str] | None = None
    records: list[list[Field]] = []
    err = None
    for f in files:
        try:
            rows = parse_csv(_read_text(f))
        except (OSError, UnicodeDecodeError, CsvError) as e:
            err = f"rank {ctx.rank}: cannot read {f}: {e}"
            break
        if not rows:
            err = f"rank {ctx.rank}: {f} has no header row"
            break
        names = [v for v, _ in rows[0]]
        if header is None:
            header = names
        elif names != header:
            err = f"rank {ctx.rank}: header of {f} {names} differs from {header}"
            break
        bad = next((i for i, r in enumerate(rows[1:], 2) if len(r) != len(names)), None)
        if bad is not None:
            err = f"rank {ctx.rank}: {f} record {bad} has {len(rows[bad - 1])} fields, expected {len(names)}"
            break
        records.extend(rows[1:])
    _raise_collectively(ctx, err)

    P = ctx.world_size
    owner = int(allreduce(ctx, [ctx.rank if header is not None else P], ReduceOp.MIN)[0])
    if owner == P:
        raise CsvError("no rank holds any CSV file")
    hschema = Schema.of(("name", DataType.UTF8))
    agreed = broadcast_table(ctx, Table.from_rows([(h,) for h in header], hschema) if ctx.rank == owner else None,
                             owner)
    names = agreed["name"].to_pylist()
    mismatch = header is not None and header != names
    if allreduce(ctx, [int(mismatch)], ReduceOp.MAX)[0]:
        _raise_collectively(ctx, f"rank {ctx.rank}: header {header} differs from {names}" if mismatch else None)

    by_col = list(zip(*records)) if records else [()] * len(names)
    flags = np.array([_field_flags(c) for c in by_col], dtype=np.int64).reshape(-1)
    flags = allreduce(ctx, flags if flags.size else np.zeros(0, np.int64), ReduceOp.MIN).reshape(-1, 3)
    dtypes = [_dtype_of(*map(int, f)) for f in flags]
    schema = Schema(tuple(names), tuple(dtypes))
    if not records:
        return Table.empty(schema)
    return Table(schema, tuple(_convert(c, dt) for c, dt in zip(by_col, dtypes)))


def write_csv_partitioned(ctx: WorkerContext, t: Table, out_dir: str | os.PathLike) -> Path:
    """Write this rank's partition to ``out_dir/part-{rank:05}.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"part-{ctx.rank:05}.csv"
    path.write_text(format_csv(t), encoding="utf-8", newline="")
    return path


def read_csv(path: str | os.PathLike) -> Table:
    """Serial read of one file with the same parsing and inference rules."""
    rows = parse_csv(_read_text(path))
    if not rows:
        raise CsvError(f"{path} has no header row")
    names = [v for v, _ in rows[0]]
    body = rows[1:]
    if any(len(r) != len(names) for r in body):
        raise CsvError(f"{path} has ragged records")
    cols = list(zip(*body)) if body else [()] * len(names)
    dtypes = [_dtype_of(*_field_flags(c)) for c in cols]
    schema = Schema(tuple(names), tuple(dtypes))
    return Table(schema, tuple(_convert(c, dt) for c, dt in zip(cols, dtypes))) if body else Table.empty(schema)


__all__ = ["CsvError", "format_csv", "parse_csv", "read_csv", "read_csv_partitioned",
           "write_csv_partitioned"]
