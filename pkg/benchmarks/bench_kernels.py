"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from dia._core import _fallback

try:
    from dia._core import _kernels
except ImportError:
    _kernels = None


def make_data(n, m, rng):
    z = rng.integers(0, m, n).astype(np.int64)
    gamma = np.linspace(0.05, 0.95, m)
    a = (rng.random(n) < gamma[z]).astype(float)
    y = 1.0 + a + rng.normal(0, 0.5, n)
    return z, a, y


def cases(rng):
    for n, m in [(1000, 10), (20000, 10)]:
        z, a, y = make_data(n, m, rng)
        phi, theta, _ = _fallback.grouped_fit(z, a, y, m, 0)
        yield f"grouped_fit n={n}", lambda k, z=z, a=a, y=y, m=m: k.grouped_fit(z, a, y, m, 0)
        yield (f"grouped_influence n={n}",
               lambda k, z=z, a=a, y=y, m=m, phi=phi, theta=theta: k.grouped_influence(z, a, y, m, 0, phi, theta))
        yield f"grouped_loo n={n}", lambda k, z=z, a=a, y=y, m=m: k.grouped_loo(z, a, y, m, 0)
    z, a, y = make_data(5000, 10, rng)
    subsets = np.stack([rng.choice(5000, 250, replace=False) for _ in range(64)]).astype(np.int64)
    G = np.eye(2) * 0.5
    ref = np.array([1.0, 2.0])
    yield "subset_step B=64 k=250", lambda k: k.subset_step(z, a, y, 10, 0, subsets, G, ref, 2)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'case':32s} {'python (ms)':>12s} {'compiled (ms)':>14s} {'speedup':>8s}")
    for name, fn in cases(rng):
        number = 20
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=number, repeat=args.repeat)) / number
        if _kernels is None:
            print(f"{name:32s} {t_py * 1e3:12.3f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=number, repeat=args.repeat)) / number
        print(f"{name:32s} {t_py * 1e3:12.3f} {t_c * 1e3:14.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
