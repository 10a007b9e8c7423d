"""Combine-shuffle-reduce against shuffle-compute for groupby across cardinalities.

Measures the shuffled bytes of both strategies over a grid of C, and prints
the cost model's crossover cardinality for a range of compute constants.

    python scripts/crossover_sweep.py --rows 100000 --workers 4
"""
import argparse

from ddf.comm import CollectiveKind, bytes_sent, run_local
from ddf.bench import generate_partition
from ddf.costmodel import CostParams, crossover_cardinality
from ddf.ops import groupby


def shuffled(ctx, rows, C, strategy):
    t = generate_partition(rows // ctx.world_size, C, seed=0, rank=ctx.rank)
    groupby(ctx, t, ["key"], [("value", "sum")], strategy)
    return bytes_sent(ctx)[CollectiveKind.SHUFFLE]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=100_000)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--grid", default="0.001,0.01,0.05,0.1,0.25,0.5,0.75,1.0")
    a = ap.parse_args()
    print(f"{'C':>7} {'combine':>12} {'shuffle':>12} {'ratio':>8}")
    for C in (float(x) for x in a.grid.split(",")):
        comb = sum(run_local(a.workers, shuffled, a.rows, C, "combine_shuffle_reduce"))
        plain = sum(run_local(a.workers, shuffled, a.rows, C, "shuffle_compute"))
        print(f"{C:7.3f} {comb:12d} {plain:12d} {comb / plain:8.4f}")
    print()
    print(f"{'kappa':>9} {'C*':>8}")
    for kappa in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        p = CostParams(kappa=kappa, P=a.workers, N=a.rows, row_bytes=16)
        print(f"{kappa:9.0e} {crossover_cardinality(p):8.4f}")


if __name__ == "__main__":
    main()
