"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The first case in each group is the default-config workload; the rest are
larger banks to show how the gap grows.
"""
import argparse
import timeit

import numpy as np

from rfiad import _fallback

try:
    from rfiad import _kernels
except ImportError:
    _kernels = None

KCENTER_CASES = [  # (rows, dim, history rows, selected)
    (384, 32, 32, 16),
    (2048, 64, 128, 64),
    (8192, 64, 256, 128),
]
MAXCOS_CASES = [  # (queries, bank rows, dim)
    (16, 48, 32),
    (256, 1024, 64),
    (1024, 4096, 64),
]


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def row(label, t_py, t_cy):
    if t_cy is None:
        return f"{label:<28} {t_py * 1e3:10.3f} ms {'n/a':>12}"
    return f"{label:<28} {t_py * 1e3:10.3f} ms {t_cy * 1e3:10.3f} ms {t_py / t_cy:7.1f}x"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'case':<28} {'numpy':>13} {'cython':>13} {'speedup':>8}")

    for n, d, h, k in KCENTER_CASES:
        pts, hist = rng.normal(size=(n, d)), rng.normal(size=(h, d))
        t_py = best_of(lambda: _fallback.kcenter_greedy(pts, hist, k), args.repeat)
        t_cy = None
        if _kernels is not None:
            assert _kernels.kcenter_greedy(pts, hist, k)[0].tolist() == \
                _fallback.kcenter_greedy(pts, hist, k)[0].tolist()
            t_cy = best_of(lambda: _kernels.kcenter_greedy(pts, hist, k), args.repeat)
        print(row(f"kcenter {n}x{d} h{h} k{k}", t_py, t_cy))

    for nq, nb, d in MAXCOS_CASES:
        q, b = rng.normal(size=(nq, d)), rng.normal(size=(nb, d))
        t_py = best_of(lambda: _fallback.max_cosine(q, b), args.repeat)
        t_cy = None
        if _kernels is not None:
            t_cy = best_of(lambda: _kernels.max_cosine(q, b), args.repeat)
        print(row(f"max_cosine {nq}q {nb}b d{d}", t_py, t_cy))


if __name__ == "__main__":
    main()
