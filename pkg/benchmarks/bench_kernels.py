"""Timing comparison of the numba kernels against their numpy fallbacks.

Run:

    python benchmarks/bench_kernels.py [--repeats 5]

The numba path is compiled (and cached) on first use; a warm-up call is
excluded from the timings.  If numba is unavailable only the numpy column is
reported.  The Kuramoto-Sivashinsky stepper has no numba twin (no nopython
FFT), so it is timed on the numpy path alone for context.
"""

import argparse
import time

import numpy as np

from varfilt import kernels, models


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_pair(name, np_fn, nb_fn, repeats, results):
    t_np = timeit(np_fn, repeats)
    if nb_fn is not None:
        nb_fn()  # warm-up / JIT
        t_nb = timeit(nb_fn, repeats)
        results.append((name, t_np, t_nb, t_np / t_nb))
    else:
        results.append((name, t_np, None, None))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    gen = np.random.default_rng(0)
    results = []
    have_nb = False
    try:
        import numba  # noqa: F401

        have_nb = True
    except ImportError:
        print("numba not importable: timing the numpy path only")

    # Lorenz '96 ensemble stepping, d=40, N=20, 500 steps
    X = gen.normal(0, 2, (40, 20))

    def l96_np():
        Y = X.copy()
        for _ in range(500):
            Y = kernels._l96_rk4_np(Y, 8.0, 0.05, True)

    def l96_nb():
        Y = np.ascontiguousarray(X)
        for _ in range(500):
            Y = kernels._l96_rk4_batch_nb(Y, 8.0, 0.05, True)

    bench_pair("l96 rk4 batch (d=40, N=20, 500 steps)", l96_np,
               l96_nb if have_nb else None, args.repeats, results)

    # flow-map Jacobian, d=40, 200 steps
    x = gen.normal(0, 2, 40)
    bench_pair(
        "l96 rk4 jacobian (d=40, 200 calls)",
        lambda: [kernels._l96_rk4_jacobian_np(x, 8.0, 0.05, True) for _ in range(200)],
        (lambda: [kernels._l96_rk4_jacobian_nb(x, 8.0, 0.05, True) for _ in range(200)])
        if have_nb else None,
        args.repeats, results,
    )

    # Jacobian directional derivatives, d=40, 50 steps
    bench_pair(
        "l96 jacobian dirderivs (d=40, 50 calls)",
        lambda: [kernels._l96_rk4_jac_dirderivs_np(x, 8.0, 0.05, True) for _ in range(50)],
        (lambda: [kernels._l96_rk4_jac_dirderivs_nb(x, 8.0, 0.05, True) for _ in range(50)])
        if have_nb else None,
        args.repeats, results,
    )

    # batched similarity transform, the sensitivity hot spot
    G = gen.normal(0, 0.3, (40, 40))
    C = gen.normal(0, 1, (1600, 40, 40))
    bench_pair(
        "batched similarity (B=1600, d=40)",
        lambda: kernels._batched_similarity_np(G, C),
        (lambda: kernels._batched_similarity_nb(G, C)) if have_nb else None,
        args.repeats, results,
    )

    # KS stepping for context (numpy only: FFT-bound)
    ks = models.KSDynamics(L=22.0, D=256, dt=0.25, Sigma=0.01 * np.eye(256))
    u = np.cos(2 * np.pi * np.arange(256) / 256)

    def ks_np():
        v = u.copy()
        for _ in range(100):
            v = models.ks_step(v, ks.coeffs)

    bench_pair("ks etdrk4 (D=256, 100 steps, numpy/FFT)", ks_np, None, args.repeats, results)

    width = max(len(r[0]) for r in results) + 2
    print(f"{'kernel':<{width}}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}")
    for name, t_np, t_nb, ratio in results:
        nb_s = f"{1e3 * t_nb:11.2f}" if t_nb is not None else "          -"
        ratio_s = f"{ratio:8.2f}x" if ratio is not None else "        -"
        print(f"{name:<{width}}{1e3 * t_np:11.2f} {nb_s} {ratio_s}")
    print(f"\nselected path at import: {'numba' if kernels.USING_NUMBA else 'numpy'} "
          f"(override with VARFILT_NUMBA=0)")


if __name__ == "__main__":
    main()
