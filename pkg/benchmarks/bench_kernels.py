"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 20]

Prints one line per kernel with the best-of-N wall time for each backend and
the max absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from gradirn._kernels import BACKENDS


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (triggers JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def _parts(out):
    return [np.asarray(x) for x in out] if isinstance(out, tuple) else [np.asarray(out)]


def cases(size, rng):
    img = rng.uniform(0, 1, size=(1, size, size))
    disp = rng.normal(0, 2.0, size=(2, size, size))
    g1 = rng.normal(size=(1, size, size))
    g2 = rng.normal(size=(2, size, size))
    a = np.argwhere(rng.random((size, size)) < 0.1)
    b = np.argwhere(rng.random((size, size)) < 0.1)
    return {
        "warp_forward": (img, disp),
        "warp_backward": (img, disp, g1),
        "sampled_grad_forward": (img, disp),
        "sampled_grad_backward": (img, disp, g2),
        "directed_hausdorff": (a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if "numba" not in BACKENDS:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, inputs in cases(args.size, rng).items():
        t_np, out_np = best_of(BACKENDS["numpy"][name], inputs, args.repeat)
        t_nb, out_nb = best_of(BACKENDS["numba"][name], inputs, args.repeat)
        diff = max(float(np.abs(x - y).max()) for x, y in zip(_parts(out_np), _parts(out_nb)))
        print(f"{name:24s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
