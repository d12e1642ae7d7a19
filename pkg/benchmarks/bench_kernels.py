"""Compiled vs numpy kernels: per-call time and agreement.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, size) with the median time of each backend,
the speed-up and the largest absolute difference between their outputs.
Exits 1 if the compiled extension is not built.
"""
import argparse
import sys
import timeit

import numpy as np

from hydrocascade.hydro.backend import available_backends


def reach_case(n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n)
    zb = 0.2 * np.sin(6.0 * x)
    A = np.maximum(1.0 - zb + 0.05 * rng.standard_normal(n), 0.0)
    A[: n // 10] = 0.0  # a dry stretch exercises the wetting/drying branches
    Q = 0.1 * rng.standard_normal(n) * (A > 0)
    return (A, Q, zb, 1.0, 1.0 / n, 0.2 / n, 9.81, 1e-8, 0.03)


def tridiagonal_case(n, seed=0):
    rng = np.random.default_rng(seed)
    lower = -rng.uniform(0.1, 1.0, n)
    upper = -rng.uniform(0.1, 1.0, n)
    diag = 2.5 + rng.uniform(0.0, 1.0, n)
    return (lower, diag, upper, rng.standard_normal(n))


def bench(fn, args, repeat):
    t = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return float(np.median(t))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--sizes", default="100,1000,10000")
    a = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")
        return 1
    py, cy = backends["python"], backends["cython"]
    print(f"{'kernel':<14}{'cells':>8}{'python [ms]':>14}{'cython [ms]':>14}{'speed-up':>10}{'max diff':>12}")
    for n in (int(s) for s in a.sizes.split(",")):
        for name, case in (("reach_step", reach_case), ("thomas_solve", tridiagonal_case)):
            args = case(n)
            out_py = getattr(py, name)(*args)
            out_cy = getattr(cy, name)(*args)
            diff = max(float(np.max(np.abs(np.asarray(p) - np.asarray(c))))
                       for p, c in zip(np.atleast_2d(out_py), np.atleast_2d(out_cy)))
            t_py = bench(getattr(py, name), args, a.repeat)
            t_cy = bench(getattr(cy, name), args, a.repeat)
            print(f"{name:<14}{n:>8}{t_py * 1e3:>14.4f}{t_cy * 1e3:>14.4f}{t_py / t_cy:>10.1f}{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
