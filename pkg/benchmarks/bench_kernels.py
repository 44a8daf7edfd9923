"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--batch 128] [--size 32] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from homocl import kernels


def cases(batch, size):
    rng = np.random.default_rng(0)
    x = rng.random((batch, size, size, 3), dtype=np.float32)
    cols = kernels.im2col3x3(x, backend="python")
    boxes = np.tile([2.0, 3.0, size * 0.6, size * 0.7], (batch, 1))
    return {
        "im2col3x3": lambda b: kernels.im2col3x3(x, backend=b),
        "col2im3x3": lambda b: kernels.col2im3x3(cols, x.shape, backend=b),
        "crop_resize": lambda b: kernels.crop_resize(x, boxes, size, backend=b),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {backends}; batch {args.batch} x {args.size}x{args.size}x3 float32")
    print(f"{'kernel':<14}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.batch, args.size).items():
        t = {}
        for b in backends:
            fn(b)
            t[b] = min(timeit.repeat(lambda: fn(b), number=3, repeat=args.repeat)) / 3
        ratio = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{name:<14}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in backends)
              + f"{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
