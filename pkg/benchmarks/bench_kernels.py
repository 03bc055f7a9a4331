"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--rows 2048] [--points 64] [--bins 8] [--repeat 5]

Both backends are imported from the same module, so the flag
``TABFLOW_DISABLE_NUMBA`` does not matter here. Results also check that the
two paths agree.
"""
import argparse
import time

import numpy as np

from tabflow import _kernels as K
from tabflow import spline


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--points", type=int, default=64)
    ap.add_argument("--bins", type=int, default=8)
    ap.add_argument("--samples", type=int, default=1000, help="samples per row for CRPS")
    ap.add_argument("--crps-rows", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    raw = rng.normal(size=(args.rows, spline.raw_size(args.bins)))
    kx, ky, d = spline.constrain(raw, args.bins, 3.0).arrays()
    z = rng.normal(size=(args.rows, args.points))
    y, _ = K.rqs_forward_numpy(z, kx, ky, d, 3.0)
    s = rng.normal(size=(args.crps_rows, args.samples))
    t = rng.normal(size=args.crps_rows)

    cases = {
        "search_bins": (lambda: K.search_bins_numba(kx, z), lambda: K.search_bins_numpy(kx, z)),
        "rqs_forward": (lambda: K.rqs_forward_numba(z, kx, ky, d, 3.0), lambda: K.rqs_forward_numpy(z, kx, ky, d, 3.0)),
        "rqs_inverse": (lambda: K.rqs_inverse_numba(y, kx, ky, d, 3.0), lambda: K.rqs_inverse_numpy(y, kx, ky, d, 3.0)),
        "crps_energy": (lambda: K.crps_energy_numba(s, t), lambda: K.crps_energy_numpy(s, t)),
    }
    print(f"rows={args.rows} points={args.points} bins={args.bins} crps={args.crps_rows}x{args.samples}")
    print(f"{'kernel':<12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, (fast, slow) in cases.items():
        a, b = fast(), slow()
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y_)))) for x, y_ in
                   zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        tn, tp = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<12} {1e3 * tn:>10.2f} {1e3 * tp:>10.2f} {tp / tn:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
