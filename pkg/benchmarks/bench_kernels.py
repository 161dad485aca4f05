"""Compare the compiled and numpy im2col/col2im kernels.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from smartnet import _kernels_py

try:
    from smartnet import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

# (N, C, H, W, k, stride, padding): layer shapes of the desk network
CASES = [
    (32, 1, 28, 28, 3, 1, 1),
    (32, 8, 28, 28, 3, 1, 1),
    (32, 16, 14, 14, 3, 1, 1),
    (32, 32, 7, 7, 3, 2, 1),
    (32, 64, 4, 4, 3, 1, 1),
]


def bench(backend, x, k, s, p, repeat):
    cols = backend.im2col(x, k, s, p)
    t_im = min(timeit.repeat(lambda: backend.im2col(x, k, s, p), number=5, repeat=repeat)) / 5
    t_col = min(timeit.repeat(lambda: backend.col2im(cols, x.shape, k, s, p), number=5, repeat=repeat)) / 5
    return t_im, t_col


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = parser.parse_args()
    if _kernels_c is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'k/s/p':>8}{'im2col py':>12}{'im2col c':>11}{'x':>6}{'col2im py':>12}{'col2im c':>11}{'x':>6}")
    for n, c, h, w, k, s, p in CASES:
        x = rng.standard_normal((n, c, h, w)).astype(args.dtype)
        py_im, py_col = bench(_kernels_py, x, k, s, p, args.repeat)
        c_im, c_col = bench(_kernels_c, x, k, s, p, args.repeat)
        same = np.array_equal(_kernels_py.im2col(x, k, s, p), np.asarray(_kernels_c.im2col(x, k, s, p)))
        tag = "" if same else "  MISMATCH"
        print(f"{str((n, c, h, w)):<28}{f'{k}/{s}/{p}':>8}"
              f"{py_im * 1e3:>10.2f}ms{c_im * 1e3:>9.2f}ms{py_im / c_im:>6.2f}"
              f"{py_col * 1e3:>10.2f}ms{c_col * 1e3:>9.2f}ms{py_col / c_col:>6.2f}{tag}")


if __name__ == "__main__":
    main()
