"""Time the compiled and numpy likelihood kernels on the same designs.

Run with ``python benchmarks/bench_kernels.py``; pass ``--quick`` for a
short smoke run.
"""
import argparse
import timeit

import numpy as np

from clrpool import kernels
from clrpool._pykernel import clr_eval as py_eval

try:
    from clrpool._ckernel import clr_eval as c_eval
except ImportError:
    c_eval = None

SHAPES = [  # (strata, rows per stratum, p)
    (82, 3, 3),
    (1020, 11, 5),
    (255, 11, 5),
    (5000, 2, 2),
]


def design(n, width, p, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n * width, p))
    offsets = np.arange(n + 1, dtype=np.intp) * width
    return X, offsets, rng.normal(scale=0.3, size=p)


def best_of(fn, number, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    number = 5 if args.quick else 50
    print(f"selected backend: {kernels.BACKEND}")
    if c_eval is None:
        print("compiled kernel not built; only the numpy kernel is timed")
    print(f"{'strata':>7} {'width':>6} {'p':>3} {'order':>6} {'numpy ms':>10} "
          f"{'cython ms':>10} {'speedup':>8}")
    for n, width, p in SHAPES:
        X, offsets, beta = design(n, width, p)
        for order in (0, 2):
            t_py = best_of(lambda: py_eval(X, offsets, beta, order), number)
            if c_eval is not None:
                ref, got = py_eval(X, offsets, beta, order), c_eval(X, offsets, beta, order)
                assert abs(ref[0] - got[0]) <= 1e-9 * max(1.0, abs(ref[0]))
                t_c = best_of(lambda: c_eval(X, offsets, beta, order), number)
                c_cell, speed = f"{t_c * 1e3:10.3f}", f"{t_py / t_c:7.1f}x"
            else:
                c_cell, speed = f"{'-':>10}", f"{'-':>8}"
            print(f"{n:>7} {width:>6} {p:>3} {order:>6} {t_py * 1e3:10.3f} {c_cell} {speed}")


if __name__ == "__main__":
    main()
