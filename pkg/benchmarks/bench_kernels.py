"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--size N] [--repeat R]

Each kernel is called once per backend before timing so JIT compilation is
excluded. Results are checked for agreement before any timing is reported.
"""
import argparse
import timeit

import numpy as np

from binfer import _kernels as K


def cases(n, rng):
    theta, grad, eps, r = (rng.standard_normal(n) for _ in range(4))
    p = rng.random((n // 8, 8))
    p /= p.sum(1, keepdims=True)
    q = rng.random((n // 8, 8))
    q /= q.sum(1, keepdims=True)
    y = rng.random(n)
    return {
        "sgld_update": lambda nb: K.sgld_update(theta, grad, 1e-3, eps, use_numba=nb),
        "sghmc_update": lambda nb: K.sghmc_update(theta, r, grad, 1e-3, 1.0, 1.0, eps, use_numba=nb),
        "langevin_update": lambda nb: K.langevin_update(theta, grad, 1e-2, eps, -6.0, 6.0, use_numba=nb),
        "vp_forward_step": lambda nb: K.vp_forward_step(theta, 5.0, 1e-3, eps, use_numba=nb),
        "vp_reverse_step": lambda nb: K.vp_reverse_step(theta, grad, 5.0, 1e-3, eps, use_numba=nb),
        "trapezoid": lambda nb: K.trapezoid(y, 1e-3, use_numba=nb),
        "row_entropy": lambda nb: K.row_entropy(p, use_numba=nb),
        "row_kl": lambda nb: K.row_kl(p, q, use_numba=nb),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    if not K.NUMBA_ENABLED:
        print("numba unavailable or disabled; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(args.size, rng).items():
        ref = fn(False)
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
        if K.NUMBA_ENABLED:
            if not _same(fn(True), ref):  # also warms the JIT
                raise SystemExit(f"{name}: backends disagree")
            t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x")
        else:
            print(f"{name:<18}{t_np:>10.3f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
