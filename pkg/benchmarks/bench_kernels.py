"""Compiled kernels vs the numpy fallback on desk-scale layer shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Times the XNOR-popcount group conv, im2col and col2im for each available
backend, plus the float32 BLAS conv the training path uses, on shapes taken
from the desk network (MNIST, width 0.25, batch 64).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from groupbnn import binary_ops as bo

# (name, batch, channels, side, stride, groups) for the binary 3x3 slot
SHAPES = [
    ("block0 g=1", 64, 8, 14, 1, 1),
    ("block0 g=8", 64, 8, 14, 1, 8),
    ("block3 g=1", 64, 32, 7, 2, 1),
    ("block3 g=32", 64, 32, 7, 2, 32),
    ("block10 g=1", 64, 128, 4, 1, 1),
    ("block10 g=16", 64, 128, 4, 1, 16),
]


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = bo.available_backends()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(backends)} (selected at import: {bo.BACKEND})")
    header = f"{'layer':<14} {'op':<9}" + "".join(f"{name:>12}" for name in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header + "   (ms, best of %d)" % args.repeat)
    for name, n, c, side, stride, g in SHAPES:
        geom = bo.ConvGeometry(c, c, 3, stride, 1, g)
        ho, wo = geom.output_hw(side, side)
        x = rng.standard_normal((n, c, side, side)).astype(np.float32)
        w = rng.standard_normal(geom.weight_shape).astype(np.float32)
        xb, wb = x >= 0, w >= 0
        cols = bo.kernel.im2col(x, g, 3, 3, stride, stride, 1, 1, ho, wo)
        ops = {
            "xnor": lambda k: bo.binary_conv_counts(xb, wb, geom, backend=k),
            "im2col": lambda k: k.im2col(x, g, 3, 3, stride, stride, 1, 1, ho, wo),
            "col2im": lambda k: k.col2im(cols, n, c, side, side, 3, 3, stride, stride, 1, 1, ho, wo),
        }
        for op, fn in ops.items():
            ms = [best_of(lambda: fn(k), args.repeat) * 1e3 for k in backends.values()]
            line = f"{name:<14} {op:<9}" + "".join(f"{t:12.3f}" for t in ms)
            if len(ms) > 1:
                line += f"{ms[0] / ms[1]:9.1f}x"
            print(line)
        t = best_of(lambda: bo.float_group_conv2d(np.where(xb, 1, -1).astype(np.float32),
                                                  np.where(wb, 1, -1).astype(np.float32), geom),
                    args.repeat) * 1e3
        print(f"{name:<14} {'float':<9}{t:12.3f}   (float32 conv on +-1 data, selected backend)")


if __name__ == "__main__":
    main()
