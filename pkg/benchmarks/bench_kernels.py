"""Timing comparison of the numpy and numba kernel backends.

Runs each hot kernel on training-shaped inputs after a JIT warmup pass and
prints a table of per-call times plus the numba speedup. Matrix products are
deliberately absent: those stay on BLAS in both backends.

    python3 benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from groundlm import kernels


def timeit(fn, args, repeats):
    fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # warmup
    best = float("inf")
    for _ in range(repeats):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        t0 = time.perf_counter()
        fn(*fresh)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    rows, d, v = 2048, 128, 2000
    x = rng.normal(size=(rows, d))
    gain = rng.normal(size=d)
    bias = rng.normal(size=d)
    dy = rng.normal(size=(rows, d))
    _y, mean, rstd = kernels.numpy_impl.layernorm_forward(x, gain, bias, 1e-5)
    soft_in = rng.normal(size=(rows, d))
    soft_y = kernels.numpy_impl.softmax_forward(soft_in)
    logits = rng.normal(size=(512, v))
    targets = rng.integers(0, v, size=512)
    _losses, probs = kernels.numpy_impl.masked_ce_forward(logits, targets)
    flat = rng.normal(size=rows * d)
    grad = rng.normal(size=rows * d)
    table = rng.normal(size=(v, d))
    ids = rng.integers(0, v, size=4096)
    add_rows = rng.normal(size=(4096, d))
    points = rng.normal(size=(1000, 16))
    means = rng.normal(size=(8, 16))
    variances = np.abs(rng.normal(size=(8, 16))) + 0.1
    log_w = np.log(np.full(8, 1 / 8))
    return [
        ("layernorm_forward", (x, gain, bias, 1e-5)),
        ("layernorm_backward", (dy, x, mean, rstd, gain)),
        ("gelu_forward", (x,)),
        ("gelu_backward", (dy, x)),
        ("softmax_forward", (soft_in,)),
        ("softmax_backward", (dy, soft_y)),
        ("masked_ce_forward", (logits, targets)),
        ("masked_ce_backward", (probs, targets, 1.0 / 512)),
        ("adam_update", (flat, grad, np.zeros_like(flat), np.zeros_like(flat),
                         1, 1e-3, 0.9, 0.999, 1e-8)),
        ("scatter_add_rows", (table, ids, add_rows)),
        ("gmm_estep", (points, means, variances, log_w)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAVE_NUMBA}")
    print(f"{'kernel':<22} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, call_args in cases(rng):
        t_np = timeit(getattr(kernels.numpy_impl, name), call_args, args.repeats)
        if kernels.numba_impl is not None:
            t_nb = timeit(getattr(kernels.numba_impl, name), call_args, args.repeats)
            ratio = f"{t_np / t_nb:7.2f}x"
            nb_col = f"{t_nb * 1e6:9.1f}u"
        else:
            ratio, nb_col = "    n/a", "      n/a"
        print(f"{name:<22} {t_np * 1e6:9.1f}u {nb_col} {ratio}")


if __name__ == "__main__":
    main()
