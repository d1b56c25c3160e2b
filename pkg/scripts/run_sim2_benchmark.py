#!/usr/bin/env python3
"""Replicate the fourth-order recovery comparison.

Same protocol as the third-order run but on the n x n x 4 x 4 design with
two contextual modes, where the matrix-factorization baseline has to
collapse the contexts away.

Typical use:
    python scripts/run_sim2_benchmark.py --out results/sim2 --n-users 500
"""

import argparse
import sys

from tenrec import BenchmarkSpec, run_benchmark


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-users", type=int, default=500, dest="n_users")
    ap.add_argument("--pi0", type=float, default=0.95)
    ap.add_argument("--phi", type=float, default=0.30)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--methods", default="rem,mf,gmi")
    ap.add_argument("--grid-max", type=int, default=11)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    spec = BenchmarkSpec(
        design="sim2",
        pi0=args.pi0,
        phi_cs=args.phi,
        methods=tuple(args.methods.split(",")),
        lambda_grid=tuple(float(v) for v in range(1, args.grid_max + 1)),
        replications=args.reps,
        base_seed=args.seed,
        n_users=args.n_users,
        n_workers=args.threads,
    )
    report = run_benchmark(spec)
    report.save(args.out)
    sys.stdout.write(report.to_table())
    return 0


if __name__ == "__main__":
    sys.exit(main())
