"""Modelled strong-scaling curve of a hash-shuffle join with N fixed.

Prints startup, transfer and compute per P and marks the P with the lowest
total, where the growing message count starts to outweigh the shrinking
per-worker work.

    python scripts/strong_scaling_model.py --rows 1e9 --alpha 1e-5
"""
import argparse

from ddf.costmodel import CostParams, LocalOpKind, Pattern, pattern_cost


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=float, default=1e9)
    ap.add_argument("--alpha", type=float, default=1e-5)
    ap.add_argument("--beta", type=float, default=1e-9)
    ap.add_argument("--kappa", type=float, default=1e-8)
    ap.add_argument("--row-bytes", type=float, default=16)
    ap.add_argument("--cardinality", type=float, default=0.9)
    ap.add_argument("--max-log2", type=int, default=14)
    a = ap.parse_args()
    base = CostParams(alpha=a.alpha, beta=a.beta, kappa=a.kappa, N=a.rows, row_bytes=a.row_bytes,
                      C=a.cardinality)
    rows = []
    for k in range(1, a.max_log2 + 1):
        b = pattern_cost(Pattern.SHUFFLE_COMPUTE_HASH, base.with_(P=2 ** k), LocalOpKind.SORT_JOIN)
        rows.append((2 ** k, b))
    best = min(rows, key=lambda r: r[1].total)[0]
    print(f"{'P':>6} {'startup':>10} {'transfer':>10} {'compute':>10} {'total':>10}")
    for P, b in rows:
        mark = "  <- minimum" if P == best else ""
        print(f"{P:6d} {b.startup:10.4f} {b.transfer:10.4f} {b.compute:10.4f} {b.total:10.4f}{mark}")


if __name__ == "__main__":
    main()
