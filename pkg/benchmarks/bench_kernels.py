"""Compare the compiled and the numpy kernel backends.

Times the batched backward combinator at a few batch sizes and a full
``solve_lqr`` at N = 511 under each available backend, checks that both
backends agree, and prints one table row per measurement.

    python3 benchmarks/bench_kernels.py [--reps 20] [--seed 0]
"""
import argparse
import time

import numpy as np

from branchmpc import _kernels
from branchmpc.bench_cli import random_lqr
from branchmpc.lqr_scan import init_bwd_element, solve_lqr


def best_of(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'case':<34}" + "".join(f"{b + ' [ms]':>14}" for b in backends))

    for nx, m in ((4, 64), (4, 512), (8, 512)):
        stages, _ = random_lqr(rng, nx, 2, 2 * m)
        e = init_bwd_element(stages)
        a = [x[0::2] for x in e]
        b = [x[1::2] for x in e]
        times, outs = [], []
        for name in backends:
            k = _kernels.get_backend(name)
            outs.append(k.combine_bwd(*a, *b))
            times.append(best_of(lambda: k.combine_bwd(*a, *b), args.reps))
        for x, y in zip(outs[0], outs[-1]):
            assert np.allclose(x, y, rtol=1e-12, atol=1e-12)
        print(f"{f'combine_bwd nx={nx} batch={m}':<34}" + "".join(f"{t:>14.3f}" for t in times))

    for nx, nu in ((4, 2), (8, 4)):
        stages, term = random_lqr(rng, nx, nu, 511)
        x0 = rng.standard_normal(nx)
        times, outs = [], []
        prev = _kernels.get_backend().BACKEND
        for name in backends:
            _kernels.set_backend(name)
            outs.append(solve_lqr(stages, term, x0)[2])
            times.append(best_of(lambda: solve_lqr(stages, term, x0), max(1, args.reps // 4)))
        _kernels.set_backend(prev)
        assert np.allclose(outs[0], outs[-1], rtol=1e-10, atol=1e-10)
        print(f"{f'solve_lqr N=511 nx={nx} nu={nu}':<34}" + "".join(f"{t:>14.3f}" for t in times))


if __name__ == "__main__":
    main()
