"""Compare the numba and numpy implementations of the hot kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--size 512] [--csv out.csv]

Each kernel is checked for agreement between the two backends before it is
timed; the numba timing excludes the first (compiling) call.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
import warnings

import numpy as np

warnings.filterwarnings("ignore", module="numba")

from h2cam import _kernels as K  # noqa: E402


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size: int, rng: np.random.Generator):
    phases = np.sort(rng.uniform(0, 2 * np.pi, 64))
    targets = rng.uniform(0, 2 * np.pi, (size, size))
    yield "nearest_phase_index", (phases, targets), K.nearest_phase_index_numpy, K.nearest_phase_index_numba

    mu = rng.uniform(0, 40, (size, size))
    u = rng.random((size, size))
    z = rng.standard_normal((size, size))
    yield "poisson_icdf", (mu, u, z, 1000.0), K.poisson_icdf_numpy, K.poisson_icdf_numba

    f = rng.random((11, size // 4, size // 4))
    yield "tv_value_grad", (f, 1e-3), K.tv_value_grad_numpy, K.tv_value_grad_numba


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--csv", help="also write results here")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  agree")
    for name, inputs, f_np, f_nb in cases(args.size, rng):
        ref = f_np(*inputs)
        got = f_nb(*inputs)  # compiles
        agree = _same(ref, got)
        t_np = best_of(lambda: f_np(*inputs), args.repeat)
        t_nb = best_of(lambda: f_nb(*inputs), args.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb,
                     "agree": agree})
        print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}  {agree}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
