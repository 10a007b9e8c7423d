"""Analytic cost estimates for the operator patterns.

Communication follows the Hockney model (``alpha`` per message, ``beta`` per
byte, ``gamma`` per reduced byte); local computation is ``kappa`` times the
asymptotic operation count.  Every big-O term is evaluated with coefficient 1,
so absolute numbers are only meaningful once the constants are calibrated.
``L`` below is ``ceil(log2 P)``; linear terms use ``P - 1`` so a single worker
never pays for communication.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

from .comm import CollectiveKind

SIZEOF_SCALAR = 8


@dataclass(frozen=True)
class CostParams:
    alpha: float = 1e-6
    beta: float = 1e-9
    gamma: float = 0.0
    kappa: float = 1e-8
    P: int = 1
    N: float = 1.0
    c: int = 2
    row_bytes: float = 16.0
    C: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "kappa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.N <= 0:
            raise ValueError("N must be > 0")
        if self.C is not None and not (1.0 / self.N - 1e-15 <= self.C <= 1.0):
            raise ValueError(f"C={self.C} outside [1/N, 1]")

    @property
    def n(self) -> float:
        return self.N / self.P

    @property
    def log_p(self) -> int:
        return math.ceil(math.log2(self.P)) if self.P > 1 else 0

    def with_(self, **kw) -> CostParams:
        return replace(self, **kw)


@dataclass(frozen=True)
class StageCost:
    name: str
    startup: float = 0.0
    transfer: float = 0.0
    reduce: float = 0.0
    compute: float = 0.0
    bytes: float = 0.0

    @property
    def total(self) -> float:
        return self.startup + self.transfer + self.reduce + self.compute


@dataclass(frozen=True)
class CostBreakdown:
    startup: float = 0.0
    transfer: float = 0.0
    reduce: float = 0.0
    compute: float = 0.0
    predicted_bytes: float = 0.0
    stages: tuple[StageCost, ...] = field(default=())

    @property
    def total(self) -> float:
        return self.startup + self.transfer + self.reduce + self.compute

    @property
    def comm(self) -> float:
        return self.startup + self.transfer + self.reduce

    @classmethod
    def of(cls, stages) -> CostBreakdown:
        stages = tuple(stages)
        return cls(sum(s.startup for s in stages), sum(s.transfer for s in stages),
                   sum(s.reduce for s in stages), sum(s.compute for s in stages),
                   sum(s.bytes for s in stages), stages)

    def as_stage(self, name: str) -> StageCost:
        return StageCost(name, self.startup, self.transfer, self.reduce, self.compute, self.predicted_bytes)

    def to_dict(self) -> dict:
        return {"startup": self.startup, "transfer": self.transfer, "reduce": self.reduce,
                "compute": self.compute, "total": self.total, "predicted_bytes": self.predicted_bytes,
                "stages": [{"name": s.name, "startup": s.startup, "transfer": s.transfer,
                            "reduce": s.reduce, "compute": s.compute, "total": s.total,
                            "bytes": s.bytes} for s in self.stages]}


class AlgorithmKind(enum.Enum):
    ISEND_IRECV = "isend_irecv"
    RING = "ring"
    PAIRWISE_EXCHANGE = "pairwise_exchange"
    BRUCK = "bruck"
    RECURSIVE_DOUBLING = "recursive_doubling"
    BINOMIAL_TREE = "binomial_tree"
    SCATTER_ALLGATHER = "scatter_allgather"
    REDUCE_SCATTER_GATHER = "reduce_scatter_gather"
    REDUCE_SCATTER_ALLGATHER = "reduce_scatter_allgather"


class LocalOpKind(enum.Enum):
    SELECTION_MAP = "selection_map"
    ROW_AGGREGATION = "row_aggregation"
    PROJECTION = "projection"
    UNION = "union"
    SET_DIFFERENCE = "set_difference"
    HASH_JOIN = "hash_join"
    SORT_JOIN = "sort_join"
    TRANSPOSE = "transpose"
    UNIQUE = "unique"
    GROUPBY = "groupby"
    COLUMN_AGGREGATION = "column_aggregation"
    SORT = "sort"


class Pattern(enum.Enum):
    EMBARRASSINGLY_PARALLEL = "embarrassingly_parallel"
    SHUFFLE_COMPUTE_HASH = "shuffle_compute_hash"
    SHUFFLE_COMPUTE_RANGE = "shuffle_compute_range"
    SAMPLE_SHUFFLE_COMPUTE = "sample_shuffle_compute"
    COMBINE_SHUFFLE_REDUCE = "combine_shuffle_reduce"
    GLOBALLY_REDUCE = "globally_reduce"
    BROADCAST_COMPUTE = "broadcast_compute"
    HALO_EXCHANGE = "halo_exchange"


# -- communication ------------------------------------------------------------

def p2p_time(msg_bytes: float, params: CostParams) -> float:
    if msg_bytes < 0:
        raise ValueError("msg_bytes must be >= 0")
    return params.alpha + msg_bytes * params.beta


def shuffle_time(params: CostParams, payload_bytes: float | None = None) -> CostBreakdown:
    """All-to-all of a per-worker payload (default ``n * row_bytes``)."""
    b = params.n * params.row_bytes if payload_bytes is None else payload_bytes
    P = params.P
    moved = (P - 1) / P * b
    return CostBreakdown(startup=(P - 1) * params.alpha, transfer=moved * params.beta, predicted_bytes=moved)


A = AlgorithmKind
K = CollectiveKind
# (startup messages, transfer multiplier on bytes, reduce multiplier on bytes) as f(P, L)
_TABLE: dict[tuple[CollectiveKind, AlgorithmKind], Callable[[int, int], tuple[float, float, float]]] = {
    (K.SHUFFLE, A.ISEND_IRECV): lambda P, L: (P - 1, (P - 1) / P, 0.0),
    (K.SHUFFLE, A.RING): lambda P, L: (P - 1, P - 1, 0.0),
    (K.SHUFFLE, A.PAIRWISE_EXCHANGE): lambda P, L: (P - 1, float(P > 1), 0.0),
    (K.SHUFFLE, A.BRUCK): lambda P, L: (L, L / 2, 0.0),
    (K.ALLGATHER, A.RING): lambda P, L: (P - 1, P - 1, 0.0),
    (K.ALLGATHER, A.RECURSIVE_DOUBLING): lambda P, L: (L, P - 1, 0.0),
    (K.ALLGATHER, A.BRUCK): lambda P, L: (L, P - 1, 0.0),
    (K.BROADCAST, A.BINOMIAL_TREE): lambda P, L: (L, L, 0.0),
    (K.BROADCAST, A.SCATTER_ALLGATHER): lambda P, L: (L + P - 1, (P - 1) / P, 0.0),
    (K.REDUCE, A.BINOMIAL_TREE): lambda P, L: (L, L, L),
    (K.REDUCE, A.REDUCE_SCATTER_GATHER): lambda P, L: (L, (P - 1) / P, (P - 1) / P),
    (K.ALLREDUCE, A.BINOMIAL_TREE): lambda P, L: (L, L, L),
    (K.ALLREDUCE, A.RECURSIVE_DOUBLING): lambda P, L: (L, L, L),
    (K.ALLREDUCE, A.REDUCE_SCATTER_ALLGATHER): lambda P, L: (L, (P - 1) / P, (P - 1) / P),
}
del A, K

# messages that grow linearly with P rather than logarithmically
LINEAR_STARTUP = frozenset(k for k in _TABLE if k[1] in (AlgorithmKind.ISEND_IRECV, AlgorithmKind.RING,
                                                           AlgorithmKind.PAIRWISE_EXCHANGE,
                                                           AlgorithmKind.SCATTER_ALLGATHER))


def valid_collectives() -> list[tuple[CollectiveKind, AlgorithmKind]]:
    return list(_TABLE)


def collective_time(kind: CollectiveKind, algo: AlgorithmKind, params: CostParams,
                    nbytes: float | None = None) -> CostBreakdown:
    """Evaluate one tabulated (collective, algorithm) row for a per-worker payload."""
    f = _TABLE.get((CollectiveKind(kind), AlgorithmKind(algo)))
    if f is None:
        rows = ", ".join(f"{k.name}/{a.name}" for k, a in _TABLE)
        raise ValueError(f"no cost row for {kind.name}/{algo.name}; valid rows: {rows}")
    b = params.n * params.row_bytes if nbytes is None else nbytes
    s, t, r = f(params.P, params.log_p)
    return CostBreakdown(startup=s * params.alpha, transfer=t * b * params.beta,
                         reduce=r * b * params.gamma, predicted_bytes=t * b)


# -- computation --------------------------------------------------------------

def _log2(x: float) -> float:
    return math.log2(x) if x > 1 else 0.0


def _need_c(op: LocalOpKind, params: CostParams) -> float:
    if params.C is None:
        raise ValueError(f"{op.name} cost needs a cardinality C")
    return params.C


def local_op_cost(op: LocalOpKind, params: CostParams, n: float | None = None) -> tuple[float, float]:
    """(compute seconds, output rows) of a core local operator over ``n`` rows
    (default: rows per worker)."""
    op = LocalOpKind(op)
    n = params.n if n is None else n
    k, c = params.kappa, params.c
    O = LocalOpKind
    if op is O.SELECTION_MAP:
        work, out = n, n
    elif op is O.ROW_AGGREGATION:
        work, out = n * c, n
    elif op is O.PROJECTION:
        work, out = c, n
    elif op is O.UNION:
        work, out = n * c, n * _need_c(op, params)
    elif op is O.SET_DIFFERENCE:
        work, out = n * c, n
    elif op is O.HASH_JOIN:
        C = _need_c(op, params)
        work, out = n + n / C, n / C
    elif op is O.SORT_JOIN:
        C = _need_c(op, params)
        work, out = n * _log2(n) + n / C, n / C
    elif op is O.TRANSPOSE:
        work, out = n * c, n
    elif op is O.UNIQUE:
        work, out = n * c, n * _need_c(op, params)
    elif op is O.GROUPBY:
        work, out = n, n * _need_c(op, params)
    elif op is O.COLUMN_AGGREGATION:
        work, out = n * c, 1
    else:
        work, out = n * _log2(n), n
    return k * work, out


# -- patterns -----------------------------------------------------------------

_CORES = {
    Pattern.EMBARRASSINGLY_PARALLEL: {LocalOpKind.SELECTION_MAP, LocalOpKind.ROW_AGGREGATION,
                                      LocalOpKind.PROJECTION},
    Pattern.SHUFFLE_COMPUTE_HASH: {LocalOpKind.UNION, LocalOpKind.SET_DIFFERENCE, LocalOpKind.HASH_JOIN,
                                   LocalOpKind.SORT_JOIN, LocalOpKind.UNIQUE, LocalOpKind.GROUPBY,
                                   LocalOpKind.TRANSPOSE},
    Pattern.SHUFFLE_COMPUTE_RANGE: {LocalOpKind.SORT, LocalOpKind.SORT_JOIN, LocalOpKind.HASH_JOIN,
                                    LocalOpKind.UNION, LocalOpKind.SET_DIFFERENCE, LocalOpKind.UNIQUE,
                                    LocalOpKind.GROUPBY},
    Pattern.SAMPLE_SHUFFLE_COMPUTE: {LocalOpKind.SORT},
    Pattern.COMBINE_SHUFFLE_REDUCE: {LocalOpKind.GROUPBY, LocalOpKind.UNIQUE},
    Pattern.GLOBALLY_REDUCE: {LocalOpKind.COLUMN_AGGREGATION},
    Pattern.BROADCAST_COMPUTE: {LocalOpKind.HASH_JOIN, LocalOpKind.SORT_JOIN},
    Pattern.HALO_EXCHANGE: {LocalOpKind.SELECTION_MAP, LocalOpKind.ROW_AGGREGATION},
}


def _compute(name: str, seconds: float) -> StageCost:
    return StageCost(name, compute=seconds)


def pattern_cost(pattern: Pattern, params: CostParams, core: LocalOpKind, *,
                 sample_size: int | None = None, small_rows: float | None = None,
                 window: int = 2) -> CostBreakdown:
    """Per-worker cost of a pattern: auxiliary compute + communication + core.

    ``sample_size`` (per worker, default P) applies to sample sort,
    ``small_rows`` (total rows of the replicated side, default n) to broadcast
    compute and ``window`` to halo exchange.
    """
    pattern, core = Pattern(pattern), LocalOpKind(core)
    if core not in _CORES[pattern]:
        allowed = ", ".join(sorted(o.name for o in _CORES[pattern]))
        raise ValueError(f"{pattern.name} cannot finish with {core.name}; allowed: {allowed}")
    p, n, k = params, params.n, params.kappa
    core_cost = local_op_cost(core, p)[0]
    P = Pattern
    if pattern is P.EMBARRASSINGLY_PARALLEL:
        stages = [_compute("local-op", core_cost)]
    elif pattern is P.SHUFFLE_COMPUTE_HASH:
        stages = [_compute("partition", k * n), shuffle_time(p).as_stage("shuffle"),
                  _compute("local-op", core_cost)]
    elif pattern is P.SHUFFLE_COMPUTE_RANGE:
        rng = collective_time(CollectiveKind.ALLREDUCE, AlgorithmKind.BINOMIAL_TREE, p, 2 * SIZEOF_SCALAR)
        stages = [rng.as_stage("allreduce-range"), _compute("binning", k * n),
                  shuffle_time(p).as_stage("shuffle"), _compute("local-op", core_cost)]
    elif pattern is P.SAMPLE_SHUFFLE_COMPUTE:
        s = p.P if sample_size is None else sample_size
        key_bytes = p.row_bytes / max(p.c, 1)
        m = p.P * s
        gather = StageCost("gather-samples", startup=(p.P - 1) * p.alpha,
                           transfer=(p.P - 1) * s * key_bytes * p.beta, bytes=(p.P - 1) * s * key_bytes)
        bcast = collective_time(CollectiveKind.BROADCAST, AlgorithmKind.BINOMIAL_TREE, p,
                                (p.P - 1) * key_bytes)
        stages = [_compute("local-sort", core_cost), _compute("sample", k * s), gather,
                  _compute("calc-pivots", k * m * _log2(m) if p.P > 1 else 0.0),
                  bcast.as_stage("bcast-pivots"), _compute("split", k * n),
                  shuffle_time(p).as_stage("shuffle"), _compute("local-merge", k * n * _log2(p.P))]
    elif pattern is P.COMBINE_SHUFFLE_REDUCE:
        nc = n * _need_c(core, p)
        stages = [_compute("local-combine", core_cost), _compute("partition", k * nc),
                  shuffle_time(p, nc * p.row_bytes).as_stage("shuffle"),
                  _compute("local-reduce", local_op_cost(core, p, nc)[0])]
    elif pattern is P.GLOBALLY_REDUCE:
        ar = collective_time(CollectiveKind.ALLREDUCE, AlgorithmKind.BINOMIAL_TREE, p, p.c * SIZEOF_SCALAR)
        stages = [_compute("local-op", core_cost), ar.as_stage("allreduce"), _compute("finalize", k * p.c)]
    elif pattern is P.BROADCAST_COMPUTE:
        small = n if small_rows is None else small_rows
        bc = collective_time(CollectiveKind.BROADCAST, AlgorithmKind.BINOMIAL_TREE, p, small * p.row_bytes)
        stages = [bc.as_stage("broadcast"), _compute("local-join", core_cost)]
    else:
        if window < 1:
            raise ValueError("window must be >= 1")
        halo = (window - 1) * p.row_bytes
        comm = StageCost("halo-exchange", startup=p.alpha, transfer=halo * p.beta, bytes=halo) \
            if p.P > 1 and window > 1 else StageCost("halo-exchange")
        stages = [comm, _compute("local-op", core_cost)]
    return CostBreakdown.of(stages)


def crossover_cardinality(params: CostParams, core: LocalOpKind = LocalOpKind.GROUPBY,
                          tol: float = 1e-9) -> float:
    """Cardinality where combine-shuffle-reduce and shuffle-compute cost the same.

    Below it pre-aggregation pays off.  Returns 1 when combining never loses
    and ``1/N`` when it never wins.
    """
    lo_c = 1.0 / params.N

    def diff(C: float) -> tuple[float, float]:
        q = params.with_(C=C)
        a = pattern_cost(Pattern.COMBINE_SHUFFLE_REDUCE, q, core).total
        b = pattern_cost(Pattern.SHUFFLE_COMPUTE_HASH, q, core).total
        return a - b, max(a, b)

    d_hi, _ = diff(1.0)
    if d_hi <= 0:
        return 1.0
    d_lo, _ = diff(lo_c)
    if d_lo >= 0:
        return lo_c
    lo, hi = lo_c, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d, scale = diff(mid)
        if abs(d) < tol * scale or hi - lo < 1e-15:
            return mid
        if d < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def strong_scaling_curve(params: CostParams, Ps, pattern: Pattern = Pattern.SHUFFLE_COMPUTE_HASH,
                         core: LocalOpKind = LocalOpKind.SORT_JOIN) -> list[tuple[int, float]]:
    """(P, total) for a fixed total row count N."""
    return [(P, pattern_cost(pattern, params.with_(P=P), core).total) for P in Ps]


__all__ = [
    "AlgorithmKind", "CostBreakdown", "CostParams", "LINEAR_STARTUP", "LocalOpKind", "Pattern",
    "StageCost", "collective_time", "crossover_cardinality", "local_op_cost", "p2p_time",
    "pattern_cost", "shuffle_time", "strong_scaling_curve", "valid_collectives",
]
