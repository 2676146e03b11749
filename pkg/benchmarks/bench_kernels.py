"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly; numba must be importable and not disabled.
"""
import argparse
import timeit

import numpy as np

from agilecl import _kernels as K


def cases(rng):
    n_items, cap = 10_000, 100
    highs = np.arange(cap, n_items) + 1
    inc_draws = np.stack([rng.integers(0, highs) for _ in range(200)])
    res_draws = rng.integers(0, np.arange(cap, 5_000) + 1).astype(np.int64)
    conf = rng.uniform(size=200_000)
    idx = np.minimum((conf * 10).astype(np.int64), 9)
    hit = rng.uniform(size=conf.size) < conf
    t, p = rng.integers(0, 20, 200_000), rng.integers(0, 20, 200_000)
    return {
        "reservoir_assign (5k items, B=100)": (
            lambda: K.reservoir_assign_numpy(0, 5_000, cap, res_draws),
            lambda: K.reservoir_assign_numba(0, 5_000, cap, res_draws)),
        "inclusion_counts (200 trials x 10k)": (
            lambda: K.inclusion_counts_numpy(n_items, cap, inc_draws),
            lambda: K.inclusion_counts_numba(n_items, cap, inc_draws)),
        "reliability_counts (200k)": (
            lambda: K.reliability_counts_numpy(idx, conf, hit, 10),
            lambda: K.reliability_counts_numba(idx, conf, hit, 10)),
        "confusion_counts (200k, 20 tasks)": (
            lambda: K.confusion_counts_numpy(t, p, 20),
            lambda: K.confusion_counts_numba(t, p, 20)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba path unavailable (not installed or disabled)")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases(np.random.default_rng(0)).items():
        nb_fn()  # compile outside the timing
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
