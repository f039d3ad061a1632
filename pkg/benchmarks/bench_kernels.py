"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from modtune import _kernels_py as py

try:
    from modtune import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    x = rng.standard_normal((16 * 24, 64))
    g, b = rng.standard_normal(64), rng.standard_normal(64)
    _, xhat, rstd = py.layer_norm_forward(x, g, b, 1e-12)
    h = rng.standard_normal((16 * 24, 256))
    _, t = py.gelu_forward(h)
    s = rng.standard_normal((16 * 4 * 24, 24))
    p = py.softmax_forward(s)
    n = 200_000
    theta, grad = rng.standard_normal(n), rng.standard_normal(n)
    idx = np.sort(rng.choice(n, 1024, replace=False)).astype(np.int64)
    mk = lambda k: (np.zeros(k), np.zeros(k))  # noqa: E731
    return {
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, g, b, 1e-12),
        "layer_norm_backward": lambda k: k.layer_norm_backward(x, xhat, rstd, g),
        "gelu_forward": lambda k: k.gelu_forward(h),
        "gelu_backward": lambda k: k.gelu_backward(h, t, h),
        "softmax_forward": lambda k: k.softmax_forward(s),
        "softmax_backward": lambda k: k.softmax_backward(p, s),
        "adam_dense": lambda k: k.adam_dense(theta.copy(), grad, *mk(n), 1e-3, 0.9, 0.999, 1e-6, 0.1, 0.001),
        "adam_sparse": lambda k: k.adam_sparse(theta, grad, idx, *mk(1024), 1e-3, 0.9, 0.999, 1e-6, 0.1, 0.001),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=args.repeat, repeat=3)) / args.repeat
        if compiled is None:
            print(f"{name:<22}{1e6 * t_py:>12.1f}{'-':>12}{'-':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<22}{1e6 * t_py:>12.1f}{1e6 * t_c:>12.1f}{t_py / t_c:>9.2f}x")


if __name__ == "__main__":
    main()
