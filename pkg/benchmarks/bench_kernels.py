"""Compiled core vs pure-Python fallback.

Times the jackknife C construction, the cross-fit weight matrix, the
elementwise square and a batch of chi-bar p-values for both backends, and
checks that the two agree. Run with ``python3 benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from jive_infer import _core
from jive_infer.distributions import imhof_sf
from jive_infer.kernels import projection_diag_and_hat


def _best(fn, number, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def run(n: int, k: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, k))
    P, d = projection_diag_and_hat(Z)
    lam = 1.0 / (1.0 - d)
    C = _core.jackknife_c(P, lam)
    B = np.eye(n) - P
    weight_sets = [rng.uniform(0.05, 3.0, size=m) for m in (2, 3, 5, 8) for _ in range(5)]
    ts = [float(np.sum(w)) * 1.5 for w in weight_sets]

    cases = {
        "jackknife_c": lambda b: _core.jackknife_c(P, lam, backend=b),
        "crossfit_weights": lambda b: _core.crossfit_weights(C, B, 1e-14, backend=b)[0],
        "hadamard_square": lambda b: _core.hadamard_square(C, backend=b),
        "imhof_sf x20": lambda b: [imhof_sf(w, t, backend=b)
                                   for w, t in zip(weight_sets, ts)],
    }
    backends = ["python"] + (["compiled"] if _core.BACKEND == "compiled" else [])
    print(f"n={n} k={k}  backends: {', '.join(backends)}")
    print(f"{'case':<18}" + "".join(f"{b:>14}" for b in backends) + f"{'speedup':>10}"
          + f"{'max diff':>12}")
    for name, fn in cases.items():
        times, outs = [], []
        for b in backends:
            outs.append(np.asarray(fn(b), dtype=float))
            number = 1 if name.startswith("imhof") else 3
            times.append(_best(lambda: fn(b), number))
        diff = float(np.max(np.abs(outs[0] - outs[-1])))
        speed = times[0] / times[-1]
        print(f"{name:<18}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
              + f"{speed:>9.1f}x{diff:>12.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[200, 1000])
    ap.add_argument("--k", type=int, default=15)
    args = ap.parse_args()
    for n in args.n:
        run(n, args.k)
        print()


if __name__ == "__main__":
    main()
