"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from guidelab._kernels import _fallback

try:
    from guidelab._kernels import _ext
except ImportError:  # extension not built
    _ext = None


def cases(rng):
    T, B, H = 40, 64, 128
    pre = rng.standard_normal((T, B, H)).astype(np.float32)
    w = (rng.standard_normal((H, H)) / np.sqrt(H)).astype(np.float32)
    h0 = np.zeros((B, H), np.float32)
    hs = _fallback.elman_forward(pre, w, h0)
    ghs = rng.standard_normal(hs.shape).astype(np.float32)
    xp = rng.standard_normal((64, 16, 18, 18)).astype(np.float32)
    cols = _fallback.im2col(xp, 3, 3, 1)
    return {
        "elman_forward (T=40,B=64,H=128)": lambda m: m.elman_forward(pre, w, h0),
        "elman_backward (T=40,B=64,H=128)": lambda m: m.elman_backward(hs, ghs, w, h0),
        "im2col (64x16x18x18, 3x3)": lambda m: m.im2col(xp, 3, 3, 1),
        "col2im (64x16x18x18, 3x3)": lambda m: m.col2im(np.ascontiguousarray(cols), xp.shape, 3, 3, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _ext is None:
            print(f"{name:36s} {tp:10.3f} {'n/a':>12s}")
            continue
        tc = min(timeit.repeat(lambda: fn(_ext), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {tp:10.3f} {tc:12.3f} {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
