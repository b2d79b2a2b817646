"""Time each hot kernel on its numba path against its numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--check]

Both paths are measured in one process: the ``*_loop`` kernels are the njit
versions when numba is active, and ``*_numpy`` are the vectorised fallbacks
that ``TERRACOST_DISABLE_JIT=1`` selects.  The simulator has no vectorised
form, so its fallback is the same loop run by the interpreter.  Results
are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from terracost import _jit, kernels, synthgen
from terracost.pathseg import Path


def best_of(fn, repeat):
    fn()  # warm-up, includes compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def py_func(f):
    return getattr(f, "py_func", f)


def cases(rng):
    data = rng.random((800, 800)).astype(np.float32)
    rows = rng.uniform(0, 798, 400_000)
    cols = rng.uniform(0, 798, 400_000)
    x = rng.standard_normal((32, 42, 42, 16))
    cols6 = rng.standard_normal((32, 20, 20, 3, 3, 16))
    yield "bilinear 400k", lambda: kernels.bilinear_loop(data, rows, cols), lambda: kernels.bilinear_numpy(data, rows, cols)
    yield "nearest 400k", lambda: kernels.nearest_loop(data, rows, cols), lambda: kernels.nearest_numpy(data, rows, cols)
    yield "im2col 32x42x42x16 k3 s2", lambda: kernels.im2col_loop(x, 3, 2), lambda: kernels.im2col_numpy(x, 3, 2)
    yield ("col2im 32x20x20 k3 s2", lambda: kernels.col2im_loop(cols6, 41, 41, 2),
           lambda: kernels.col2im_numpy(cols6, 41, 41, 2))

    env = synthgen.generate_environment(20, 20, seed=1)
    cfg = synthgen.OracleConfig()
    tour = synthgen.coverage_tours(env, 1, 200, 1)[0]
    sim_args = synthgen.simulation_inputs(env, cfg, Path(tour))

    def trimmed(f):
        status, k, out = f(*sim_args)
        return np.array([status, k]), out[:k]

    yield ("simulate 200 m tour", lambda: trimmed(kernels.simulate_loop),
           lambda: trimmed(py_func(kernels.simulate_loop)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--check", action="store_true", help="only verify that both paths agree")
    args = ap.parse_args()
    print(f"active backend: {_jit.backend()}")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fast, slow in cases(rng):
        a, b = fast(), slow()
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(np.asarray(u, float), np.asarray(v, float), rtol=1e-12, atol=1e-12):
                raise SystemExit(f"{name}: numba and numpy paths disagree")
        if args.check:
            print(f"{name:<28}{'agree':>12}")
            continue
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, max(1, args.repeat // 2))
        print(f"{name:<28}{1e3 * tf:>12.2f}{1e3 * ts:>12.2f}{ts / tf:>9.1f}x")


if __name__ == "__main__":
    main()
