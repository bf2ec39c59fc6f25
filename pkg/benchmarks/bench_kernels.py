"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--scale 1.0] [--repeat 5]

Each kernel runs once untimed (JIT compile / cache load), then ``--repeat``
times; the best wall time is reported. Outputs of both flavours are checked
for agreement before timing.
"""

import argparse
import time

import numpy as np

from hsq import kernels


def best_of(fn, args, repeat):
    fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # warm-up
    times = []
    for _ in range(repeat):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        t0 = time.perf_counter()
        fn(*fresh)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale, rng):
    N = int(20_000 * scale)
    M, K, D = 4, 256, 16
    C = rng.standard_normal((M, K, D))
    R = rng.standard_normal((N, D))
    SC = C  # sigma = I is enough for timing
    unary = np.ascontiguousarray(np.einsum("nd,mkd->nmk", R, SC))
    gram = np.ascontiguousarray(np.einsum("mkd,jld->mkjl", SC, C))
    codes = rng.integers(0, K, (N, M))
    table = rng.standard_normal((M, K))
    big_codes = rng.integers(0, K, (N * 10, M))
    tags = rng.random((int(3000 * scale), 8))
    empty = np.zeros((0, 0))
    return {
        "icm (N=%d, M=4, K=256, 3 sweeps)" % N:
            ("icm", (unary, gram, codes, 3, False, empty)),
        "code_gram (N=%d)" % N: ("code_gram", (codes, K)),
        "code_sums (N=%d, D=16)" % N: ("code_sums", (R, codes, K)),
        "aqd_scan (N=%d)" % (N * 10): ("aqd_scan", (table, big_codes)),
        "merge_pass (n=%d, D=8)" % len(tags): ("merge_pass", (tags, 0.15)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    for label, (name, inputs) in cases(args.scale, rng).items():
        fast = getattr(kernels, f"_{name}_numba")
        slow = getattr(kernels, f"_{name}_numpy")
        if name == "icm":  # in-place on codes; compare the results
            a, b = inputs[2].copy(), inputs[2].copy()
            fast(*inputs[:2], a, *inputs[3:])
            slow(*inputs[:2], b, *inputs[3:])
            assert np.array_equal(a, b), name
        else:
            assert np.allclose(fast(*inputs), slow(*inputs)), name
        t_np = best_of(slow, inputs, args.repeat)
        t_nb = best_of(fast, inputs, args.repeat)
        print(f"{label:42s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
