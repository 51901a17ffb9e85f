#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against their pure-numpy fallbacks.

Each hot kernel runs on a realistic stage-3 workload (128x128 grid, the
default splat density and hypothesis counts). The first jitted call pays
compilation; timings below report warm runs.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from satsplat import kernels


def timeit(fn, repeats):
    fn()  # warm-up (jit compilation / cache faults)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def splat_workload(n=16384, h=128, w=128, seed=0):
    rng = np.random.default_rng(seed)
    uv0 = rng.uniform(0, w, (n, 2))
    ang = rng.uniform(0, np.pi, n)
    s1 = rng.uniform(1.0, 3.0, n)
    s2 = rng.uniform(1.0, 3.0, n)
    m = np.empty((n, 2, 2))
    m[:, 0, 0] = np.cos(ang) * s1
    m[:, 0, 1] = -np.sin(ang) * s2
    m[:, 1, 0] = np.sin(ang) * s1
    m[:, 1, 1] = np.cos(ang) * s2
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    minv = np.empty_like(m)
    minv[:, 0, 0] = m[:, 1, 1] / det
    minv[:, 0, 1] = -m[:, 0, 1] / det
    minv[:, 1, 0] = -m[:, 1, 0] / det
    minv[:, 1, 1] = m[:, 0, 0] / det
    ssq = (m ** 2).sum(axis=(1, 2))
    sep = np.sqrt(np.maximum(0.25 * ssq ** 2 - det ** 2, 0))
    radius = np.sqrt(18.0) * np.sqrt(0.5 * ssq + sep) + 1e-9
    zc = np.column_stack([rng.uniform(5, 25, n), rng.normal(size=n) * 0.1,
                          rng.normal(size=n) * 0.1])
    color = rng.uniform(0, 1, (n, 3))
    alpha = rng.uniform(0.2, 0.9, n)
    order = np.argsort(rng.normal(size=n)).astype(np.int64)
    grads = (rng.normal(size=(h, w, 3)), rng.normal(size=(h, w)),
             rng.normal(size=(h, w)))
    return (order, uv0, minv, zc, color, alpha, radius, h, w), grads


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(1)
    rows = []

    coefs = rng.normal(size=(8, 20))
    pts = rng.uniform(-1.2, 1.2, (3, 8 * 131072))
    rows.append(("poly20_batch (1M pts x 8 polys)",
                 lambda: kernels.poly20_batch_np(coefs, *pts),
                 lambda: kernels.poly20_batch_nb(coefs, *pts)))

    src = rng.normal(size=(26, 128, 128))
    u = rng.uniform(-1, 128, 8 * 131072)
    v = rng.uniform(-1, 128, 8 * 131072)
    rows.append(("bilinear_gather (26ch, 1M pts)",
                 lambda: kernels.bilinear_gather_np(src, u, v),
                 lambda: kernels.bilinear_gather_nb(src, u, v)))

    vol = rng.normal(size=(32, 128, 128))
    taps = np.array([0.25, 0.5, 0.25])
    rows.append(("smooth3 (32x128x128)",
                 lambda: kernels.smooth3_np(vol, taps),
                 lambda: kernels.smooth3_nb(vol, taps)))

    fw_args, grads = splat_workload()
    rows.append(("composite_forward (16k splats, 128^2)",
                 lambda: kernels.composite_forward_np(*fw_args, 16, 18.0),
                 lambda: kernels.composite_forward_nb(*fw_args, 16, 18.0)))
    rows.append(("composite_backward (16k splats, 128^2)",
                 lambda: kernels.composite_backward_np(*fw_args, *grads, 16, 18.0),
                 lambda: kernels.composite_backward_nb(*fw_args, *grads, 16, 18.0)))

    print(f"{'kernel':42s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, np_fn, nb_fn in rows:
        t_np = timeit(np_fn, args.repeats)
        t_nb = timeit(nb_fn, args.repeats)
        print(f"{name:42s} {t_np * 1e3:9.1f}ms {t_nb * 1e3:9.1f}ms "
              f"{t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
