"""Benchmark harness: timed operator runs, scaling suites, calibration and
model-vs-measurement reports."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import shutil
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import ops
from ..columnar import Column, DataType, Schema, Table
from ..comm import (WorkerContext, barrier, gather_table, recv_table, run_world,
                    send_table)
from ..comm.transport import MAX_WORLD
from ..costmodel import CostParams, LocalOpKind, Pattern, pattern_cost
from ..ops.local import sort_table
from .datagen import DEFAULT_SCHEMA, generate_partition

log = logging.getLogger(__name__)

OPS = ("join", "groupby", "sort", "union", "difference", "unique", "select", "project", "map",
       "aggregate", "window", "csv")
TRANSPORTS = ("local", "tcp")

# operator -> (valid strategies, default)
STRATEGIES = {
    "join": ([a.value for a in ops.JoinAlgorithm], ops.JoinAlgorithm.HASH_SHUFFLE.value),
    "groupby": ([s.value for s in ops.GroupByStrategy], ops.GroupByStrategy.COMBINE_SHUFFLE_REDUCE.value),
    "sort": ([s.value for s in ops.SortStrategy], ops.SortStrategy.SAMPLE_SORT.value),
}

COMM_STAGES = frozenset({"shuffle", "shuffle-left", "shuffle-right", "broadcast", "allreduce",
                         "allreduce-range", "allreduce-matched", "gather-samples", "bcast-pivots",
                         "halo-exchange", "binning"})


@dataclass(frozen=True)
class BenchConfig:
    op: str = "join"
    rows: int = 1_000_000
    workers: int = 4
    cardinality: float = 0.9
    transport: str = "local"
    seed: int = 0
    strategy: str | None = None
    reps: int = 5
    rows_per_worker: bool = False
    window: int = 3
    exclusive_compute: bool | None = None
    timeout: float = 120.0
    out: str | None = None

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}; choose from {', '.join(OPS)}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if not 1 <= self.workers <= MAX_WORLD:
            raise ValueError(f"workers must be in [1, {MAX_WORLD}]")
        if self.total_rows < self.workers:
            raise ValueError("rows must be >= workers")
        if not 0 < self.cardinality <= 1:
            raise ValueError("cardinality must be in (0, 1]")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.local_rows(self.workers - 1) * self.cardinality < 1 - 1e-9:
            raise ValueError("rows per worker times cardinality must be >= 1")
        if self.strategy is not None:
            if self.op not in STRATEGIES:
                raise ValueError(f"op {self.op!r} takes no strategy")
            if self.strategy not in STRATEGIES[self.op][0]:
                raise ValueError(f"strategy for {self.op} must be one of {STRATEGIES[self.op][0]}")

    @property
    def total_rows(self) -> int:
        return self.rows * self.workers if self.rows_per_worker else self.rows

    def local_rows(self, rank: int) -> int:
        N, P = self.total_rows, self.workers
        return N // P + (1 if rank < N % P else 0)

    @property
    def resolved_strategy(self) -> str | None:
        if self.op in STRATEGIES:
            return self.strategy or STRATEGIES[self.op][1]
        return None

    @property
    def gate(self) -> bool:
        """Serialise compute stages when workers outnumber cores."""
        if self.exclusive_compute is not None:
            return self.exclusive_compute
        return self.workers > (os.cpu_count() or 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def expected_stages(cfg: BenchConfig) -> tuple[str, ...]:
    s = cfg.resolved_strategy
    key = {"join": f"join/{s}", "groupby": f"groupby/{s}", "sort": f"sort/{s}",
           "aggregate": "aggregate", "window": "window"}.get(cfg.op, cfg.op)
    if cfg.op == "csv":
        return ("write", "read")
    return ops.STAGES[key]


# -- worker side ----------------------------------------------------------------

def _inputs(cfg: BenchConfig, rank: int) -> tuple[Table, Table]:
    n = cfg.local_rows(rank)
    a = generate_partition(n, cfg.cardinality, cfg.seed, rank, 0)
    b = generate_partition(n, cfg.cardinality, cfg.seed, rank, 1)
    return a, b


def _execute(ctx: WorkerContext, cfg: BenchConfig, a: Table, b: Table, scratch: str | None) -> Table:
    op, s = cfg.op, cfg.resolved_strategy
    if op == "join":
        return ops.join(ctx, a, b, ops.JoinKind.INNER, s, on=["key"])
    if op == "groupby":
        return ops.groupby(ctx, a, ["key"], [("value", "sum")], s)
    if op == "sort":
        return ops.sort(ctx, a, "value", s)
    if op == "union":
        return ops.union_distinct(ctx, a, b)
    if op == "difference":
        return ops.difference(ctx, a, b)
    if op == "unique":
        return ops.unique(ctx, a, ["key"])
    if op == "aggregate":
        return ops.column_aggregate(ctx, a, [("value", "sum"), ("value", "mean")])
    if op == "window":
        return ops.rolling_window(ctx, a, "value", cfg.window)
    if op == "csv":
        with ctx.stage("write", compute=True):
            ops.write_csv_partitioned(ctx, a, scratch)
        barrier(ctx)
        with ctx.stage("read"):
            files = [os.path.join(scratch, f"part-{r:05}.csv") for r in range(ctx.world_size)]
            return ops.read_csv_partitioned(ctx, files)
    with ctx.stage("local-op", compute=True):
        if op == "select":
            return ops.select(a, lambda t: t["value"].data % 2 == 0)
        if op == "project":
            return ops.project(a, ["key"])
        return ops.map_column(a, "value", lambda v: v * 2)


def bench_worker(ctx: WorkerContext, cfg: BenchConfig, scratch: str | None = None) -> list[dict]:
    """Run every repetition on this rank; one raw record per repetition."""
    a, b = _inputs(cfg, ctx.rank)
    reps = []
    for _ in range(cfg.reps):
        barrier(ctx)
        ctx.stages.clear()
        ctx.reset_counters()
        t0 = time.perf_counter()
        out = _execute(ctx, cfg, a, b, scratch)
        total = time.perf_counter() - t0
        reps.append({"rank": ctx.rank, "total_wall_s": total, "out_rows": out.num_rows,
                     "bytes": {k.name: v for k, v in ctx.counters.items()},
                     "stages": [(s.name, s.wall_s, s.cpu_s, s.bytes) for s in ctx.stages]})
        barrier(ctx)
    return reps


# -- reports --------------------------------------------------------------------

@dataclass
class StageTiming:
    name: str
    wall_s: float
    bytes: int
    mean_wall_s: float = 0.0


@dataclass
class TimingReport:
    config: dict
    stages: list[StageTiming]
    total_wall_s: float
    total_wall_mean_s: float
    rank_detail: list[dict] = field(default_factory=list)

    def stage(self, name: str) -> StageTiming:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def stage_names(self) -> list[str]:
        return [s.name for s in self.stages]

    @property
    def total_bytes(self) -> int:
        return sum(s.bytes for s in self.stages)

    def to_dict(self) -> dict:
        return {"config": self.config,
                "stages": [{"name": s.name, "wall_s": s.wall_s, "bytes": s.bytes,
                            "mean_wall_s": s.mean_wall_s} for s in self.stages],
                "total_wall_s": self.total_wall_s, "total_wall_mean_s": self.total_wall_mean_s,
                "rank_detail": self.rank_detail}


def _stage_walls(rep: dict) -> dict[str, tuple[float, int]]:
    out: dict[str, tuple[float, int]] = {}
    for name, wall, _cpu, nbytes in rep["stages"]:
        w, b = out.get(name, (0.0, 0))
        out[name] = (w + wall, b + nbytes)
    return out


def build_report(cfg: BenchConfig, per_rank: Sequence[Sequence[dict]]) -> TimingReport:
    """Stage walls of the critical-path rank (the slowest one) in the median
    timed repetition; the first repetition is a warm-up when there are
    several.  Bytes are summed over ranks."""
    P = len(per_rank)
    nrep = len(per_rank[0])
    timed = list(range(1, nrep) if nrep > 1 else range(nrep))
    names: list[str] = []
    for name, *_ in per_rank[0][-1]["stages"]:
        if name not in names:
            names.append(name)
    totals = {i: [per_rank[r][i]["total_wall_s"] for r in range(P)] for i in timed}
    med = statistics.median_low(max(totals[i]) for i in timed)
    rep = next(i for i in timed if max(totals[i]) == med)
    crit = int(np.argmax(totals[rep]))
    views = [_stage_walls(per_rank[r][rep]) for r in range(P)]
    last = [_stage_walls(per_rank[r][-1]) for r in range(P)]
    stages = [StageTiming(n, views[crit].get(n, (0.0, 0))[0], sum(v.get(n, (0.0, 0))[1] for v in last),
                          sum(v.get(n, (0.0, 0))[0] for v in views) / P) for n in names]
    # per-rank detail comes from the same repetition as the headline numbers
    detail = []
    for r in range(P):
        view = views[r]
        detail.append({"rank": r, "total_wall_s": totals[rep][r],
                       "out_rows": per_rank[r][rep]["out_rows"], "bytes": per_rank[r][rep]["bytes"],
                       "stages": [{"name": n, "wall_s": view[n][0], "bytes": view[n][1]} for n in view]})
    total_mean = statistics.median(sum(totals[i]) / P for i in timed)
    return TimingReport(cfg.to_dict(), stages, med, total_mean, detail)


class BenchError(RuntimeError):
    pass


def run_benchmark(cfg: BenchConfig) -> TimingReport:
    scratch = tempfile.mkdtemp(prefix="ddf-bench-") if cfg.op == "csv" else None
    try:
        per_rank = run_world(cfg.workers, bench_worker, cfg, scratch, transport=cfg.transport,
                             timeout=cfg.timeout, exclusive_compute=cfg.gate)
    except Exception as e:  # noqa: BLE001 - surfaced as one structured error
        raise BenchError(f"{cfg.op} on {cfg.workers} {cfg.transport} workers failed: {e}") from e
    finally:
        if scratch:
            shutil.rmtree(scratch, ignore_errors=True)
    return build_report(cfg, per_rank)


# rank-major record exchange for socket workers launched from the environment
_RAW = Schema.of(("rank", DataType.INT64), ("rep", DataType.INT64), ("name", DataType.UTF8),
                 ("wall", DataType.FLOAT64), ("cpu", DataType.FLOAT64), ("bytes", DataType.INT64),
                 ("kind", DataType.UTF8))


def _pack(reps: list[dict]) -> Table:
    rows = []
    for i, rep in enumerate(reps):
        rows.append((rep["rank"], i, "__total__", rep["total_wall_s"], 0.0, rep["out_rows"], None))
        for k, v in rep["bytes"].items():
            rows.append((rep["rank"], i, "__bytes__", 0.0, 0.0, v, k))
        for name, wall, cpu, nbytes in rep["stages"]:
            rows.append((rep["rank"], i, name, wall, cpu, nbytes, None))
    return Table.from_rows(rows, _RAW)


def _unpack(t: Table, P: int, nrep: int) -> list[list[dict]]:
    out = [[{"rank": r, "total_wall_s": 0.0, "out_rows": 0, "bytes": {}, "stages": []} for _ in range(nrep)]
           for r in range(P)]
    for r, i, name, wall, cpu, nbytes, kind in t.to_pylist():
        rec = out[r][i]
        if name == "__total__":
            rec["total_wall_s"], rec["out_rows"] = wall, nbytes
        elif name == "__bytes__":
            rec["bytes"][kind] = nbytes
        else:
            rec["stages"].append((name, wall, cpu, nbytes))
    return out


def run_env_worker(ctx: WorkerContext, cfg: BenchConfig, scratch: str) -> TimingReport | None:
    """Body for a worker started with DDF_RANK/DDF_WORLD/DDF_COORD; rank 0
    returns the report."""
    reps = bench_worker(ctx, cfg, scratch)
    gathered = gather_table(ctx, _pack(reps), 0)
    if ctx.rank != 0:
        return None
    return build_report(cfg, _unpack(gathered, ctx.world_size, cfg.reps))


# -- scaling --------------------------------------------------------------------

@dataclass
class ScalingResult:
    kind: str
    reports: list[TimingReport]
    skipped: list[int]

    def table(self) -> list[dict]:
        rows = []
        for rep in self.reports:
            row = {"workers": rep.config["workers"], "rows": rep.config["rows"],
                   "total_wall_s": rep.total_wall_s, "bytes": rep.total_bytes}
            row.update({f"{s.name}_s": s.wall_s for s in rep.stages})
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {"kind": self.kind, "skipped": self.skipped, "table": self.table(),
                "reports": [r.to_dict() for r in self.reports]}


def scaling_suite(kind: str, cfg: BenchConfig, workers: Sequence[int]) -> ScalingResult:
    """Strong scaling keeps ``cfg.rows`` total; weak keeps it per worker."""
    if kind not in ("strong", "weak"):
        raise ValueError("kind must be 'strong' or 'weak'")
    reports, skipped = [], []
    for P in workers:
        try:
            c = dataclasses.replace(cfg, workers=P, rows_per_worker=(kind == "weak"))
        except ValueError as e:
            log.warning("skipping P=%d: %s", P, e)
            skipped.append(P)
            continue
        reports.append(run_benchmark(c))
    return ScalingResult(kind, reports, skipped)


# -- calibration ----------------------------------------------------------------

DEFAULT_SIZES = tuple([0, 1] + [1 << k for k in range(4, 23, 2)])  # 1 B .. 4 MiB
DEFAULT_SORT_SIZES = (10_000, 30_000, 100_000, 300_000)


@dataclass
class CalibrationResult:
    alpha: float
    beta: float
    kappa: float
    residual_comm: float
    residual_compute: float
    samples: list[tuple[int, float]] = field(default_factory=list)

    def params(self, **kw) -> CostParams:
        return CostParams(alpha=self.alpha, beta=self.beta, kappa=self.kappa, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fit_hockney(sizes: Sequence[float], times: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``T = alpha + n * beta``; returns (alpha, beta, rms residual)."""
    x = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    if x.size < 2 or np.unique(x).size < 2:
        raise ValueError("need samples at two or more distinct message sizes")
    A = np.column_stack([np.ones_like(x), x])
    (alpha, beta), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((A @ np.array([alpha, beta]) - y) ** 2)))
    return max(float(alpha), 0.0), max(float(beta), 0.0), res


def fit_kappa(sizes: Sequence[int], times: Sequence[float]) -> tuple[float, float]:
    """Least-squares ``T = kappa * n log2 n`` through the origin."""
    x = np.array([n * math.log2(n) if n > 1 else 0.0 for n in sizes])
    y = np.asarray(times, dtype=np.float64)
    if not np.any(x > 0):
        raise ValueError("need at least one sort sample with n > 1")
    (kappa,), *_ = np.linalg.lstsq(x[:, None], y, rcond=None)
    return max(float(kappa), 0.0), float(np.sqrt(np.mean((x * kappa - y) ** 2)))


def _pingpong(ctx: WorkerContext, sizes: Sequence[int], reps: int) -> list[tuple[int, float]]:
    out = []
    schema = Schema.of(("b", DataType.INT64))
    for size in sizes:
        t = Table(schema, (Column.from_numpy(np.zeros(size // 8, np.int64)),))
        best = math.inf
        for _ in range(reps):
            barrier(ctx)
            t0 = time.perf_counter()
            if ctx.rank == 0:
                send_table(ctx, t, 1)
                recv_table(ctx, 1)
            elif ctx.rank == 1:
                send_table(ctx, recv_table(ctx, 0), 0)
            best = min(best, (time.perf_counter() - t0) / 2)
        out.append((size, best))
    return out


def _time_sort(n: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    t = Table(Schema.of(("k", DataType.INT64)), (Column.from_numpy(rng.integers(0, 1 << 40, n)),))
    t0 = time.perf_counter()
    sort_table(t, "k")
    return time.perf_counter() - t0


def calibrate(transport: str = "local", measure: Callable[[int], float] | None = None,
              sizes: Sequence[int] = DEFAULT_SIZES, reps: int = 5,
              sort_measure: Callable[[int], float] | None = None,
              sort_sizes: Sequence[int] = DEFAULT_SORT_SIZES) -> CalibrationResult:
    """Fit alpha/beta from a ping-pong size sweep and kappa from local sorts.

    ``measure`` / ``sort_measure`` replace the real timers (one-way seconds
    for a message size; seconds to sort n rows).
    """
    if len(sizes) < 2:
        raise ValueError("calibration needs at least two message sizes")
    if measure is not None:
        samples = [(s, float(measure(s))) for s in sizes]
    else:
        samples = run_world(2, _pingpong, list(sizes), reps, transport=transport)[0]
    alpha, beta, res_c = fit_hockney([s for s, _ in samples], [t for _, t in samples])
    timer = sort_measure or _time_sort
    kappa, res_k = fit_kappa(sort_sizes, [timer(n) for n in sort_sizes])
    return CalibrationResult(alpha, beta, kappa, res_c, res_k, samples)


# -- prediction -----------------------------------------------------------------

_PATTERN = {
    ("join", "hash"): (Pattern.SHUFFLE_COMPUTE_HASH, LocalOpKind.HASH_JOIN),
    ("join", "sort"): (Pattern.SHUFFLE_COMPUTE_HASH, LocalOpKind.SORT_JOIN),
    ("join", "broadcast"): (Pattern.BROADCAST_COMPUTE, LocalOpKind.HASH_JOIN),
    ("groupby", "shuffle_compute"): (Pattern.SHUFFLE_COMPUTE_HASH, LocalOpKind.GROUPBY),
    ("groupby", "combine_shuffle_reduce"): (Pattern.COMBINE_SHUFFLE_REDUCE, LocalOpKind.GROUPBY),
    ("sort", "sample"): (Pattern.SAMPLE_SHUFFLE_COMPUTE, LocalOpKind.SORT),
    ("sort", "histogram"): (Pattern.SHUFFLE_COMPUTE_RANGE, LocalOpKind.SORT),
    ("union", None): (Pattern.SHUFFLE_COMPUTE_HASH, LocalOpKind.UNION),
    ("difference", None): (Pattern.SHUFFLE_COMPUTE_HASH, LocalOpKind.SET_DIFFERENCE),
    ("unique", None): (Pattern.COMBINE_SHUFFLE_REDUCE, LocalOpKind.UNIQUE),
    ("select", None): (Pattern.EMBARRASSINGLY_PARALLEL, LocalOpKind.SELECTION_MAP),
    ("map", None): (Pattern.EMBARRASSINGLY_PARALLEL, LocalOpKind.SELECTION_MAP),
    ("project", None): (Pattern.EMBARRASSINGLY_PARALLEL, LocalOpKind.PROJECTION),
    ("aggregate", None): (Pattern.GLOBALLY_REDUCE, LocalOpKind.COLUMN_AGGREGATION),
    ("window", None): (Pattern.HALO_EXCHANGE, LocalOpKind.SELECTION_MAP),
}


def model_inputs(cfg: BenchConfig, calib: CalibrationResult) -> tuple[Pattern, LocalOpKind, CostParams, dict]:
    """Pattern, core and cost parameters describing a benchmark config."""
    if cfg.op == "csv":
        raise ValueError("no cost model for partitioned I/O")
    pattern, core = _PATTERN[(cfg.op, cfg.resolved_strategy)]
    ncols = len(DEFAULT_SCHEMA)
    two_sided = cfg.op in ("join", "union", "difference")
    # both relations go through the same shuffle, so model them as one of 2N rows
    N = cfg.total_rows * (2 if two_sided and pattern is not Pattern.BROADCAST_COMPUTE else 1)
    params = CostParams(alpha=calib.alpha, beta=calib.beta, kappa=calib.kappa, P=cfg.workers, N=N,
                        c=ncols, row_bytes=8 * ncols, C=cfg.cardinality)
    extra = {"window": cfg.window} if pattern is Pattern.HALO_EXCHANGE else {}
    if pattern is Pattern.BROADCAST_COMPUTE:
        extra["small_rows"] = cfg.total_rows
    return pattern, core, params, extra


def predict_vs_measured(cfg: BenchConfig, calib: CalibrationResult,
                        report: TimingReport | None = None) -> dict:
    """Pair the model's breakdown with a measured run (run now if not given)."""
    pattern, core, params, extra = model_inputs(cfg, calib)
    pred = pattern_cost(pattern, params, core, **extra)
    report = report or run_benchmark(cfg)
    P = cfg.workers
    shuffle_stages = {"shuffle", "shuffle-left", "shuffle-right"}
    measured_comm = sum(s.wall_s for s in report.stages if s.name in COMM_STAGES)
    measured_compute = sum(s.wall_s for s in report.stages if s.name not in COMM_STAGES)
    measured_shuffle_bytes = sum(s.bytes for s in report.stages if s.name in shuffle_stages) / P
    pred_shuffle_bytes = sum(s.bytes for s in pred.stages if s.name == "shuffle")

    def ratio(a: float, b: float) -> float | None:
        return a / b if b else (1.0 if a == 0 else None)

    return {
        "config": cfg.to_dict(), "pattern": pattern.value, "core": core.value,
        "params": dataclasses.asdict(params), "predicted": pred.to_dict(),
        "startup_term_s": (P - 1) * params.alpha,
        "measured": {"comm_s": measured_comm, "compute_s": measured_compute,
                     "total_wall_s": report.total_wall_s, "shuffle_bytes_per_worker": measured_shuffle_bytes,
                     "stages": [dataclasses.asdict(s) for s in report.stages]},
        "ratios": {"comm": ratio(measured_comm, pred.comm), "compute": ratio(measured_compute, pred.compute),
                   "total": ratio(report.total_wall_s, pred.total),
                   "bytes": ratio(measured_shuffle_bytes, pred_shuffle_bytes)},
        "predicted_shuffle_bytes_per_worker": pred_shuffle_bytes,
    }


__all__ = [
    "BenchConfig", "BenchError", "CalibrationResult", "ScalingResult", "StageTiming", "TimingReport",
    "bench_worker", "build_report", "calibrate", "expected_stages", "fit_hockney", "fit_kappa",
    "model_inputs", "predict_vs_measured", "run_benchmark", "run_env_worker", "scaling_suite",
    "COMM_STAGES", "OPS", "STRATEGIES",
]
