"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default model on 64x64 slices with batch 8.
"""
import argparse
import timeit

import numpy as np

from lesionseg import _ext
from lesionseg._ext import fallback

SHAPES = [
    ("im2row 3x3 level0", "im2row", (8, 64, 64, 8), (3, 3, 1, 1)),
    ("im2row 3x3 level3", "im2row", (8, 8, 8, 64), (3, 3, 1, 1)),
    ("im2row 2x2 s2 (convT bwd)", "im2row", (8, 64, 64, 8), (2, 2, 2, 0)),
    ("row2im 3x3 level0", "row2im", (8, 64, 64, 8), (3, 3, 1, 1)),
    ("row2im 2x2 s2 (convT fwd)", "row2im", (8, 64, 64, 8), (2, 2, 2, 0)),
    ("maxpool2 fwd level0", "pool_f", (8, 64, 64, 8), None),
    ("maxpool2 bwd level0", "pool_b", (8, 64, 64, 8), None),
]


def make_call(mod, kind, shape, args, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    if kind == "im2row":
        return lambda: mod.im2row(x, *args)
    if kind == "row2im":
        rows = fallback.im2row(x, *args)
        return lambda: mod.row2im(rows, shape, *args)
    y, arg = fallback.maxpool2_forward(x)
    if kind == "pool_f":
        return lambda: mod.maxpool2_forward(x)
    return lambda: mod.maxpool2_backward(arg, y)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ext.BACKEND != "cython":
        print("compiled kernels are not available; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8}")
    for name, kind, shape, kargs in SHAPES:
        res = []
        for mod in (fallback, _ext):
            fn = make_call(mod, kind, shape, kargs, rng)
            fn()
            number = 5
            res.append(min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number * 1e3)
        print(f"{name:<28} {res[0]:>12.3f} {res[1]:>12.3f} {res[0] / res[1]:>7.2f}x")


if __name__ == "__main__":
    main()
