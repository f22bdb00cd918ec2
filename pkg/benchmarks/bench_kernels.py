"""Time the numba and pure-numpy paths of each hot kernel.

    python3 benchmarks/bench_kernels.py [--trials 5] [--csv out.csv]

Both paths run in the same process through the ``backend=`` argument, so
numba must be importable (do not set DUET_DISABLE_NUMBA).
"""
import argparse
import csv
import sys
import time

import numpy as np

from duet import kernels
from duet._accel import NUMBA_AVAILABLE


def median_time(fn, trials):
    fn()  # compile / warm caches
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    for n in (256, 1024, 2048):
        phi_q, phi_k = np.exp(rng.standard_normal((2, n, 64)) * 0.1)
        v = rng.standard_normal((n, 64))
        yield f"quadratic_attention n={n}", lambda b, a=(phi_q, phi_k, v): kernels.quadratic_attention(*a, backend=b)
    for n in (10_000, 200_000):
        table = np.zeros((5000, 64))
        ids = rng.integers(0, 5000, n)
        rows = rng.standard_normal((n, 64))
        yield f"scatter_add_rows n={n}", lambda b, a=(table, ids, rows): kernels.scatter_add_rows(*a, backend=b)
    for n in (10_000, 1_000_000):
        s = np.round(rng.random(n), 3)
        y = rng.random(n) < 0.3
        yield f"rank_sum_auc n={n}", lambda b, a=(s, y): kernels.rank_sum_auc(*a, backend=b)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        print("numba is unavailable; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':<32}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fn in cases(rng):
        t_nb = median_time(lambda: fn("numba"), args.trials)
        t_np = median_time(lambda: fn("numpy"), args.trials)
        rows.append({"case": name, "numba_s": t_nb, "numpy_s": t_np})
        print(f"{name:<32}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>9.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
