"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row runs the same inputs through both backends and reports the best
wall time of ``--repeat`` runs and the speed-up.
"""

import argparse
import time

import numpy as np

from hivmob import _pykernels

try:
    from hivmob import _ckernels
except ImportError:  # pragma: no cover
    raise SystemExit("compiled extension not built; run: python setup.py build_ext --inplace")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def svr_problem(rng, n, p):
    X = rng.uniform(0.5, 1.5, (n, p))
    y = X[:, 0] * 3 + rng.normal(0, 0.1, n)
    X = X / X.mean(0)
    return np.ascontiguousarray(X @ X.T), y


def cases(rng):
    budget = lambda n: max(1_000, 20 * n)  # noqa: E731
    for n, p, C in ((30, 51, 1.0), (30, 51, 1000.0), (50, 20, 1000.0)):
        K, y = svr_problem(rng, n, p)

        def smo(impl, K=K, y=y, C=C, n=n):
            impl.smo_solve(K, y, C, 0.1, np.zeros(2 * n), 1e-8, 10_000_000, budget(n))

        yield f"smo_solve n={n} p={p} C={C:g}", smo

    K, y = svr_problem(rng, 30, 20)
    Cs = np.logspace(-3, 3, 9)

    def loo(impl):
        impl.svr_loo_mse(K, y, Cs, 0.1, 1e-3, 10_000_000, budget(29))

    yield "svr_loo_mse n=30 grid=9", loo

    r = rng.normal(size=400)

    def bias(impl):
        impl.optimal_bias(r, 0.1)

    yield "optimal_bias n=400", bias

    gx, gy = rng.uniform(0, 300, 4000), rng.uniform(0, 300, 4000)
    cx, cy = rng.uniform(0, 300, 200), rng.uniform(0, 300, 200)
    h = rng.uniform(5, 40, 200)
    t = rng.integers(10, 60, 200).astype(float)
    pos = np.floor(t * 0.05)

    def ksum(impl):
        impl.kernel_sums(gx, gy, cx, cy, h, t, pos, 3.0)

    yield "kernel_sums 4000 cells x 200 clusters", ksum


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'python':>11s} {'cython':>11s} {'speed-up':>9s}")
    for name, fn in cases(rng):
        tp = best_of(lambda: fn(_pykernels), args.repeat)
        tc = best_of(lambda: fn(_ckernels), args.repeat)
        print(f"{name:42s} {tp * 1e3:9.2f}ms {tc * 1e3:9.2f}ms {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
