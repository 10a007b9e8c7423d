"""Columnar tables: typed columns with validity bitmaps, string offsets and a
flat buffer-list wire form.

A column is a tuple of buffers (validity bitmap, offsets, data).  Fixed-width
columns carry no offsets; ``Utf8`` carries ``length + 1`` int64 offsets into a
UTF-8 byte buffer.  Bool is stored one byte per row; validity is bit-packed
(LSB first).  Tables are immutable once built.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

MAGIC = b"DDF1"


class DecodeError(ValueError):
    """Raised when a serialized table header disagrees with its buffers."""


class SchemaError(ValueError):
    pass


class DataType(enum.IntEnum):
    INT64 = 0
    FLOAT64 = 1
    BOOL = 2
    UTF8 = 3

    @property
    def width(self) -> int:
        """Bytes per row of the data buffer (1 for Utf8 bytes)."""
        return _WIDTH[self]

    @property
    def is_numeric(self) -> bool:
        return self in (DataType.INT64, DataType.FLOAT64)

    @property
    def numpy(self) -> np.dtype:
        return _NP[self]


_WIDTH = {DataType.INT64: 8, DataType.FLOAT64: 8, DataType.BOOL: 1, DataType.UTF8: 1}
_NP = {
    DataType.INT64: np.dtype("<i8"),
    DataType.FLOAT64: np.dtype("<f8"),
    DataType.BOOL: np.dtype("u1"),
    DataType.UTF8: np.dtype("u1"),
}


def pack_validity(mask: np.ndarray) -> np.ndarray | None:
    """Bit-pack a boolean validity mask; ``None`` when every row is valid."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return None
    return np.packbits(mask, bitorder="little")


def unpack_validity(bits: np.ndarray | None, length: int) -> np.ndarray:
    if bits is None:
        return np.ones(length, dtype=bool)
    return np.unpackbits(bits, count=length, bitorder="little").astype(bool)


@dataclass(frozen=True, eq=False)
class Column:
    dtype: DataType
    length: int
    data: np.ndarray
    validity: np.ndarray | None = None
    offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("negative column length")
        if self.validity is not None and self.validity.size * 8 < self.length:
            raise ValueError("validity bitmap shorter than column")
        if self.dtype is DataType.UTF8:
            off = self.offsets
            if off is None or off.size != self.length + 1:
                raise ValueError("utf8 column needs length + 1 offsets")
            if off[0] != 0 or off[-1] != self.data.size or np.any(np.diff(off) < 0):
                raise ValueError("utf8 offsets must start at 0, be non-decreasing and end at data size")
        else:
            if self.offsets is not None:
                raise ValueError(f"{self.dtype.name} column cannot carry offsets")
            if self.data.size != self.length:
                raise ValueError("data buffer size does not match length")

    # construction ---------------------------------------------------------
    @classmethod
    def from_values(cls, dtype: DataType, values: Sequence[Any]) -> Column:
        """Build from Python scalars, ``None`` meaning null."""
        dtype = DataType(dtype)
        n = len(values)
        mask = np.fromiter((v is not None for v in values), dtype=bool, count=n)
        if dtype is DataType.UTF8:
            encoded = [v.encode("utf-8") if v is not None else b"" for v in values]
            lens = np.fromiter(map(len, encoded), dtype=np.int64, count=n)
            offsets = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(lens, out=offsets[1:])
            data = np.frombuffer(b"".join(encoded), dtype=np.uint8)
            return cls(dtype, n, data, pack_validity(mask), offsets)
        fill = {DataType.INT64: 0, DataType.FLOAT64: 0.0, DataType.BOOL: False}[dtype]
        data = np.array([fill if v is None else v for v in values], dtype=dtype.numpy)
        return cls(dtype, n, data.reshape(n), pack_validity(mask))

    @classmethod
    def from_numpy(cls, values: np.ndarray, valid: np.ndarray | None = None) -> Column:
        values = np.asarray(values)
        if values.dtype.kind == "b":
            dtype = DataType.BOOL
        elif values.dtype.kind in "iu":
            dtype = DataType.INT64
        elif values.dtype.kind == "f":
            dtype = DataType.FLOAT64
        else:
            raise TypeError(f"unsupported numpy dtype {values.dtype}")
        data = np.ascontiguousarray(values, dtype=dtype.numpy)
        bits = None
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            data = np.where(valid, data, 0).astype(dtype.numpy)
            bits = pack_validity(valid)
        return cls(dtype, data.size, data, bits)

    @classmethod
    def empty(cls, dtype: DataType) -> Column:
        dtype = DataType(dtype)
        offsets = np.zeros(1, dtype=np.int64) if dtype is DataType.UTF8 else None
        return cls(dtype, 0, np.empty(0, dtype=dtype.numpy), None, offsets)

    # access ---------------------------------------------------------------
    def is_valid(self) -> np.ndarray:
        return unpack_validity(self.validity, self.length)

    @property
    def null_count(self) -> int:
        if self.validity is None:
            return 0
        return int(self.length - self.is_valid().sum())

    def to_numpy(self) -> np.ndarray:
        """Values as a numpy array (fixed width only); null slots hold zero."""
        if self.dtype is DataType.UTF8:
            return np.array(self.to_pylist(), dtype=object)
        if self.dtype is DataType.BOOL:
            return self.data.astype(bool)
        return self.data

    def to_pylist(self) -> list:
        valid = self.is_valid()
        if self.dtype is DataType.UTF8:
            raw = self.data.tobytes()
            off = self.offsets.tolist()
            return [
                raw[off[i]:off[i + 1]].decode("utf-8") if valid[i] else None
                for i in range(self.length)
            ]
        vals = self.to_numpy().tolist()
        if self.validity is None:
            return vals
        return [v if ok else None for v, ok in zip(vals, valid.tolist())]

    def buffers(self) -> list[tuple[str, bytes]]:
        out = []
        if self.validity is not None:
            out.append(("validity", self.validity.tobytes()))
        if self.offsets is not None:
            out.append(("offsets", self.offsets.astype("<i8", copy=False).tobytes()))
        out.append(("data", self.data.tobytes()))
        return out

    @property
    def nbytes(self) -> int:
        return sum(len(b) for _, b in self.buffers())

    def take(self, indices: np.ndarray) -> Column:
        """Gather rows; an index of -1 produces a null row."""
        idx = np.asarray(indices, dtype=np.int64)
        missing = idx < 0
        safe = np.where(missing, 0, idx) if self.length else np.zeros_like(idx)
        if self.length == 0 and idx.size and not missing.all():
            raise IndexError("take from empty column")
        valid = self.is_valid()[safe] if self.length else np.zeros(idx.size, bool)
        valid = valid & ~missing
        if self.dtype is DataType.UTF8:
            off = self.offsets
            starts = off[safe] if self.length else np.zeros(idx.size, np.int64)
            lens = (off[safe + 1] - starts) if self.length else np.zeros(idx.size, np.int64)
            lens = np.where(valid, lens, 0)
            new_off = np.zeros(idx.size + 1, dtype=np.int64)
            np.cumsum(lens, out=new_off[1:])
            total = int(new_off[-1])
            byte_idx = np.repeat(starts - new_off[:-1], lens) + np.arange(total, dtype=np.int64)
            return Column(self.dtype, idx.size, self.data[byte_idx], pack_validity(valid), new_off)
        data = self.data[safe] if self.length else np.zeros(idx.size, self.dtype.numpy)
        if not valid.all():
            data = np.where(valid, data, 0).astype(self.dtype.numpy)
        return Column(self.dtype, idx.size, data, pack_validity(valid))

    def equals(self, other: Column) -> bool:
        if self.dtype != other.dtype or self.length != other.length:
            return False
        va, vb = self.is_valid(), other.is_valid()
        if not np.array_equal(va, vb):
            return False
        if self.dtype is DataType.UTF8:
            return self.to_pylist() == other.to_pylist()
        a, b = self.data[va], other.data[vb]
        if self.dtype is DataType.FLOAT64:
            a, b = a.view(np.int64), b.view(np.int64)
        return bool(np.array_equal(a, b))


@dataclass(frozen=True)
class Schema:
    names: tuple[str, ...]
    dtypes: tuple[DataType, ...]
    # stored sorted: the wire header flags key columns, not their order
    key_indices: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dtypes", tuple(DataType(d) for d in self.dtypes))
        object.__setattr__(self, "key_indices", tuple(sorted(set(self.key_indices))))
        if len(self.names) != len(self.dtypes):
            raise SchemaError("names and dtypes differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError(f"duplicate column names in {self.names}")
        if any(not 0 <= k < len(self.names) for k in self.key_indices):
            raise SchemaError("key index out of bounds")

    @classmethod
    def of(cls, *fields: tuple[str, DataType], keys: Iterable[str] = ()) -> Schema:
        names = [n for n, _ in fields]
        return cls(tuple(names), tuple(d for _, d in fields), tuple(names.index(k) for k in keys))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown column {name!r}; have {list(self.names)}") from None

    def dtype(self, name: str) -> DataType:
        return self.dtypes[self.index(name)]

    def same_fields(self, other: Schema) -> bool:
        return self.names == other.names and self.dtypes == other.dtypes


@dataclass(frozen=True, eq=False)
class Table:
    schema: Schema
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if len(self.columns) != len(self.schema):
            raise SchemaError("column count does not match schema arity")
        lengths = {c.length for c in self.columns}
        if len(lengths) > 1:
            raise SchemaError(f"columns have different lengths {sorted(lengths)}")
        for col, dt in zip(self.columns, self.schema.dtypes):
            if col.dtype != dt:
                raise SchemaError(f"column dtype {col.dtype.name} does not match schema {dt.name}")

    @classmethod
    def from_pydict(cls, data: dict[str, Sequence[Any]], dtypes: dict[str, DataType] | None = None,
                    keys: Iterable[str] = ()) -> Table:
        dtypes = dict(dtypes or {})
        fields, cols = [], []
        for name, values in data.items():
            dt = dtypes.get(name) or infer_dtype(values)
            fields.append((name, dt))
            cols.append(Column.from_values(dt, list(values)))
        return cls(Schema.of(*fields, keys=keys), tuple(cols))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[Any]], schema: Schema) -> Table:
        cols = list(zip(*rows)) if rows else [()] * len(schema)
        return cls(schema, tuple(Column.from_values(dt, list(c)) for dt, c in zip(schema.dtypes, cols)))

    @classmethod
    def empty(cls, schema: Schema) -> Table:
        return cls(schema, tuple(Column.empty(dt) for dt in schema.dtypes))

    @property
    def num_rows(self) -> int:
        return self.columns[0].length if self.columns else 0

    def __len__(self) -> int:
        return self.num_rows

    def __getitem__(self, name: str) -> Column:
        return self.columns[self.schema.index(name)]

    def column(self, name: str) -> Column:
        return self[name]

    def to_pydict(self) -> dict[str, list]:
        return {n: c.to_pylist() for n, c in zip(self.schema.names, self.columns)}

    def to_pylist(self) -> list[tuple]:
        return list(zip(*(c.to_pylist() for c in self.columns))) if self.columns else []

    def equals(self, other: Table) -> bool:
        return (self.schema == other.schema
                and all(a.equals(b) for a, b in zip(self.columns, other.columns)))

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.columns)

    def row_width(self) -> float:
        """Bytes per row: fixed widths plus mean string bytes."""
        w = 0.0
        for c in self.columns:
            if c.dtype is DataType.UTF8:
                w += c.data.size / c.length if c.length else 0.0
            else:
                w += c.dtype.width
        return w

    def __repr__(self) -> str:
        cols = ", ".join(f"{n}:{d.name}" for n, d in zip(self.schema.names, self.schema.dtypes))
        return f"Table[{self.num_rows} rows]({cols})"


def infer_dtype(values: Sequence[Any]) -> DataType:
    seen = [v for v in values if v is not None]
    if not seen:
        return DataType.INT64
    if all(isinstance(v, (bool, np.bool_)) for v in seen):
        return DataType.BOOL
    if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in seen):
        return DataType.INT64
    if all(isinstance(v, (int, float, np.number)) for v in seen):
        return DataType.FLOAT64
    if all(isinstance(v, str) for v in seen):
        return DataType.UTF8
    raise TypeError("cannot infer a single column type")


# -- serialization ----------------------------------------------------------

@dataclass
class SerializedTable:
    header: bytes
    buffers: list[bytes] = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return len(self.header) + sum(len(b) for b in self.buffers)

    def frames(self) -> list[bytes]:
        return [self.header, *self.buffers]

    @classmethod
    def from_frames(cls, frames: Sequence[bytes]) -> SerializedTable:
        if not frames:
            raise DecodeError("no header frame")
        return cls(bytes(frames[0]), [bytes(b) for b in frames[1:]])


def serialize_table(t: Table) -> SerializedTable:
    head = [MAGIC, struct.pack("<IQ", len(t.schema), t.num_rows)]
    sizes, buffers = [], []
    keys = set(t.schema.key_indices)
    for i, (name, col) in enumerate(zip(t.schema.names, t.columns)):
        raw = name.encode("utf-8")
        flags = (1 if col.validity is not None else 0) | (2 if i in keys else 0)
        head.append(struct.pack("<BBH", int(col.dtype), flags, len(raw)) + raw)
        for _, buf in col.buffers():
            sizes.append(len(buf))
            buffers.append(buf)
    head.append(struct.pack(f"<{len(sizes)}Q", *sizes))
    return SerializedTable(b"".join(head), buffers)


def deserialize_table(s: SerializedTable) -> Table:
    h = s.header
    try:
        if h[:4] != MAGIC:
            raise DecodeError(f"bad magic {h[:4]!r}")
        ncols, nrows = struct.unpack_from("<IQ", h, 4)
        pos = 16
        specs = []
        for _ in range(ncols):
            tag, flags, nlen = struct.unpack_from("<BBH", h, pos)
            pos += 4
            name = h[pos:pos + nlen].decode("utf-8")
            pos += nlen
            try:
                dtype = DataType(tag)
            except ValueError:
                raise DecodeError(f"unknown dtype tag {tag}") from None
            specs.append((name, dtype, flags))
        nbuf = sum(1 + (f & 1) + (d is DataType.UTF8) for _, d, f in specs)
        sizes = struct.unpack_from(f"<{nbuf}Q", h, pos)
        pos += 8 * nbuf
    except struct.error as e:
        raise DecodeError(f"truncated header: {e}") from None
    if pos != len(h):
        raise DecodeError(f"header has {len(h) - pos} trailing bytes")
    if len(s.buffers) != nbuf:
        raise DecodeError(f"header declares {nbuf} buffers, got {len(s.buffers)}")
    for i, (want, buf) in enumerate(zip(sizes, s.buffers)):
        if want != len(buf):
            raise DecodeError(f"buffer {i}: header says {want} bytes, buffer has {len(buf)}")
    it = iter(s.buffers)
    cols = []
    for name, dtype, flags in specs:
        validity = np.frombuffer(next(it), dtype=np.uint8) if flags & 1 else None
        offsets = np.frombuffer(next(it), dtype="<i8") if dtype is DataType.UTF8 else None
        data = np.frombuffer(next(it), dtype=dtype.numpy)
        try:
            cols.append(Column(dtype, nrows, data, validity, offsets))
        except ValueError as e:
            raise DecodeError(f"column {name!r}: {e}") from None
    keys = [i for i, (_, _, f) in enumerate(specs) if f & 2]
    schema = Schema(tuple(n for n, _, _ in specs), tuple(d for _, d, _ in specs), tuple(keys))
    if ncols == 0 and nrows:
        raise DecodeError("rows declared for a zero-column table")
    return Table(schema, tuple(cols))


# -- row plumbing -----------------------------------------------------------

def concat_tables(parts: Sequence[Table], schema: Schema | None = None) -> Table:
    parts = list(parts)
    if not parts:
        if schema is None:
            raise SchemaError("concat of no tables needs a schema")
        return Table.empty(schema)
    schema = schema or parts[0].schema
    for p in parts:
        if not p.schema.same_fields(schema):
            raise SchemaError(f"schema mismatch in concat: {p.schema} vs {schema}")
    if len(parts) == 1:
        return parts[0]
    cols = []
    for j, dt in enumerate(schema.dtypes):
        pieces = [p.columns[j] for p in parts]
        n = sum(c.length for c in pieces)
        data = np.concatenate([c.data for c in pieces]) if pieces else np.empty(0, dt.numpy)
        valid = np.concatenate([c.is_valid() for c in pieces])
        offsets = None
        if dt is DataType.UTF8:
            offsets = np.zeros(n + 1, dtype=np.int64)
            lens = np.concatenate([np.diff(c.offsets) for c in pieces])
            np.cumsum(lens, out=offsets[1:])
        cols.append(Column(dt, n, data, pack_validity(valid), offsets))
    return Table(schema, tuple(cols))


def take_rows(t: Table, indices: Sequence[int] | np.ndarray) -> Table:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= t.num_rows):
        raise IndexError(f"row index out of range for table of {t.num_rows} rows")
    return Table(t.schema, tuple(c.take(idx) for c in t.columns))


def take_nullable(t: Table, indices: np.ndarray) -> Table:
    """Like take_rows, but -1 yields an all-null row."""
    idx = np.asarray(indices, dtype=np.int64)
    return Table(t.schema, tuple(c.take(idx) for c in t.columns))


def split_rows(t: Table, dest: np.ndarray, nparts: int) -> list[Table]:
    """Stable split of rows into ``nparts`` tables by destination."""
    dest = np.asarray(dest, dtype=np.int64)
    if nparts == 1:
        return [t]
    order = np.argsort(dest, kind="stable")
    bounds = np.searchsorted(dest[order], np.arange(nparts + 1))
    return [take_rows(t, order[bounds[r]:bounds[r + 1]]) for r in range(nparts)]


def order_keys(col: Column) -> list[np.ndarray]:
    """Sort keys for one column, least significant first, nulls ordered first."""
    valid = col.is_valid()
    if col.dtype is DataType.UTF8:
        vals = col.to_numpy()
        vals[~valid] = ""
        if len(vals):
            _, ranks = np.unique(vals.astype(object), return_inverse=True)
        else:
            ranks = np.empty(0, np.int64)
        return [ranks.reshape(-1), valid]
    # null slots hold arbitrary bytes; blank them so they never break ties
    data = np.where(valid, col.data, 0).astype(col.dtype.numpy) if not valid.all() else col.data
    if col.dtype is DataType.FLOAT64:
        # bit pattern breaks -0.0/0.0 ties deterministically
        return [data.view(np.int64), data, valid]
    return [data, valid]


def sort_indices(t: Table, names: Sequence[str] | None = None) -> np.ndarray:
    """Stable lexicographic row order over ``names`` (all columns by default)."""
    if t.num_rows == 0:
        return np.empty(0, dtype=np.int64)
    cols = [t[n] for n in names] if names is not None else list(t.columns)
    keys: list[np.ndarray] = []
    for col in reversed(cols):
        keys.extend(order_keys(col))
    if not keys:
        return np.arange(t.num_rows)
    return np.lexsort(keys)


def canonical_sort(t: Table) -> Table:
    return take_rows(t, sort_indices(t))
