"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from sdequiv import _pykernels

try:
    from sdequiv import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    costs = rng.normal(size=(10_000, 150))
    yield "return_to_go 10000x150", "return_to_go", (costs, 0.9)
    for d, n in ((1, 3201), (2, 161), (3, 41)):
        lo, step = np.full(d, -4.0), np.full(d, 8.0 / (n - 1))
        nodes = np.full(d, n, dtype=np.int64)
        pts = rng.uniform(-4.5, 4.5, size=(200_000 // d, d))
        yield f"interp_weights d={d} m={len(pts)}", "interp_weights", (pts, lo, step, nodes)


def _as_tuple(r):
    return r if isinstance(r, tuple) else (r,)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, fn, a in cases(rng):
        t_py = min(timeit.repeat(lambda: getattr(_pykernels, fn)(*a), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{label:34s} {1e3 * t_py:10.2f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: getattr(_ckernels, fn)(*a), number=1, repeat=args.repeat))
        same = all(np.array_equal(np.asarray(x), np.asarray(y))
                   for x, y in zip(_as_tuple(getattr(_ckernels, fn)(*a)), _as_tuple(getattr(_pykernels, fn)(*a))))
        print(f"{label:34s} {1e3 * t_py:10.2f} {1e3 * t_c:10.2f} {t_py / t_c:7.1f}x{'' if same else '  MISMATCH'}")


if __name__ == "__main__":
    main()
