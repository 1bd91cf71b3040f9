"""Benchmark the compiled numerical kernels against the pure-numpy fallback.

Run as: python3 benchmarks/bench_core.py [--repeat N]

Times the displaced-block statistics, the block log-likelihood evaluation
and the varying-window threshold profile (known and unknown variance) on
realistically sized inputs, and prints the per-call timings plus speedups.
Both backends are imported explicitly, so the numbers do not depend on the
VOXELSELECT_PURE_PYTHON environment switch.
"""

import argparse
import timeit

import numpy as np

from voxelselect._core import kernels_py

try:
    from voxelselect._core import _kernels as compiled
except ImportError:
    compiled = None


def _block_inputs(rng, n=40, d=24 * 32 * 32):
    y = rng.standard_normal(n * d)
    s2 = rng.uniform(0.5, 2.0, n * d)
    tgt = rng.integers(0, d, n * d).astype(np.intp)
    eta = rng.standard_normal(d)
    sig2 = rng.uniform(0.5, 2.0, d)
    return y, s2, tgt, eta, sig2, d


def _threshold_inputs(rng, n=50_000):
    absy = np.sort(np.abs(rng.standard_normal(n)))[::-1].copy()
    H = np.zeros(n + 1)
    H[1:] = np.cumsum(1.0 / np.arange(1, n + 1))
    ks = np.arange(1, n - 50, 97, dtype=np.intp)
    sigmas = np.sqrt(np.cumsum(absy[::-1] ** 2)[::-1] / np.arange(n, 0, -1))[ks]
    X = kernels_py.gauss_abs_transform(absy, 1.0)
    return absy, X, H, ks, sigmas


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    y, s2, tgt, eta, sig2, d = _block_inputs(rng)
    absy, X, H, ks, sigmas = _threshold_inputs(rng)

    stats = kernels_py.block_stats(y, s2, tgt, eta, sig2, d)
    nu2 = np.full(d, 0.7)

    cases = {
        "block_stats": lambda impl: impl.block_stats(y, s2, tgt, eta, sig2, d),
        "block_loglik_values": lambda impl: impl.block_loglik_values(*stats, nu2),
        "eta_varying": lambda impl: impl.eta_varying(X, ks, H),
        "eta_varying_unknown":
            lambda impl: impl.eta_varying_unknown(absy, sigmas, ks, H),
    }

    print(f"{'kernel':24s} {'python':>12s} {'compiled':>12s} {'speedup':>9s}")
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(kernels_py),
                                 number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{name:24s} {t_py * 1e3:10.2f}ms {'n/a':>12s} {'n/a':>9s}")
            continue
        t_c = min(timeit.repeat(lambda: call(compiled),
                                number=1, repeat=args.repeat))
        ref, got = call(kernels_py), call(compiled)
        ref = ref if isinstance(ref, tuple) else (ref,)
        got = got if isinstance(got, tuple) else (got,)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(np.asarray(a), np.asarray(b),
                                       rtol=1e-10, atol=1e-10)
        print(f"{name:24s} {t_py * 1e3:10.2f}ms {t_c * 1e3:10.2f}ms "
              f"{t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
