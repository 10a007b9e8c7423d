"""Weak-scaling join breakdown at desk scale.

Holds rows per worker fixed and prints, per P, the wall of every stage and the
shuffled bytes per worker next to the (P-1)/P share of one worker's payload.

    python scripts/weak_scaling_join.py --rows 100000 --workers 1,2,4,8
"""
import argparse
import json

from ddf.bench import BenchConfig, generate_partition, scaling_suite
from ddf.columnar import serialize_table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=100_000, help="rows per worker per table")
    ap.add_argument("--workers", default="1,2,4,8")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--cardinality", type=float, default=0.9)
    ap.add_argument("--strategy", default="hash", choices=["hash", "sort", "broadcast"])
    ap.add_argument("--json", default=None, help="also write the full reports here")
    a = ap.parse_args()
    cfg = BenchConfig(op="join", rows=a.rows, rows_per_worker=True, reps=a.reps,
                      cardinality=a.cardinality, strategy=a.strategy)
    res = scaling_suite("weak", cfg, [int(x) for x in a.workers.split(",")])
    payload = sum(len(f) for s in (0, 1)
                  for f in serialize_table(generate_partition(a.rows, a.cardinality, 0, 0, s)).frames())
    names = res.reports[0].stage_names
    print("P".rjust(3), *(n.rjust(14) for n in names), "total".rjust(10), "bytes/worker".rjust(14),
          "(P-1)/P".rjust(12))
    for rep in res.reports:
        P = rep.config["workers"]
        print(str(P).rjust(3), *(f"{rep.stage(n).wall_s:14.4f}" for n in names), f"{rep.total_wall_s:10.4f}",
              f"{rep.total_bytes / P:14.0f}", f"{(P - 1) / P * payload:12.0f}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump(res.to_dict(), f, indent=2)


if __name__ == "__main__":
    main()
