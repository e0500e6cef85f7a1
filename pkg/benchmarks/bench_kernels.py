"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each row reports the best wall time of both backends, the speedup and the
max absolute difference between their outputs.  The first numba call (JIT
compile or cache load) is excluded by a warm-up run.
"""

import argparse
import time

import numpy as np

from fracgirsanov.fractional import (TimeGrid, _compute_cell_weights, fbm_from_increments,
                                     kernel_cell_weights, sample_increment_batch)
from fracgirsanov.girsanov import (_forward_kernel_numba, _forward_kernel_numpy,
                                   _inverse_kernel_numba, _inverse_kernel_numpy,
                                   _sup_partial_numba, _sup_partial_numpy, forward_transform,
                                   inverse_transform)
from fracgirsanov.malliavin import kernel_rows
from fracgirsanov.registry import step_process
from fracgirsanov.special import hyp2f1_scalar, hyp2f1_numpy


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _diff(a, b):
    if isinstance(a, tuple):
        a, b = a[0], b[0]
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(quick):
    n_w = 64 if quick else 256
    n = 32 if quick else 64
    batch = 100 if quick else 1000
    H = 0.3
    yield f"cell weights H={H} n={n_w}", \
        lambda: _compute_cell_weights(H, n_w, "numba", "moment"), \
        lambda: _compute_cell_weights(H, n_w, "numpy", "moment")

    grid = TimeGrid(n)
    w = kernel_cell_weights(H, grid)
    om = fbm_from_increments(w, sample_increment_batch(0, "bench", np.arange(batch), grid))
    d = np.ascontiguousarray(np.random.default_rng(0).normal(size=(batch, n)))
    W = np.ascontiguousarray(w.matrix)
    yield f"sup partial sums B={batch} n={n}", \
        lambda: _sup_partial_numba(W, d, False), lambda: _sup_partial_numpy(W, d, False)

    s = step_process("0.3*tanh@0.25,0.75")
    rows = np.ascontiguousarray(kernel_rows(w, s.anchors))
    fam = forward_transform(s, om)
    G = np.ascontiguousarray(fam.gradients)
    yield f"forward derivative kernel B={batch} n={n}", \
        lambda: _forward_kernel_numba(rows, G, grid.dt), \
        lambda: _forward_kernel_numpy(rows, G, grid.dt)

    sl = inverse_transform(s, om, 1.0)
    Gi = np.ascontiguousarray(sl.gradients)
    yield f"inverse derivative kernel B={batch} n={n}", \
        lambda: _inverse_kernel_numba(rows, Gi, grid.dt, n), \
        lambda: _inverse_kernel_numpy(rows, Gi, grid.dt, n)

    zs = np.linspace(-3.0, 0.99, 20000)
    yield "hyp2f1 x20000", \
        lambda: np.array([hyp2f1_scalar(-0.2, 0.2, 0.8, z) for z in zs]), \
        lambda: hyp2f1_numpy(-0.2, 0.2, 0.8, zs)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="small sizes for a smoke run")
    args = parser.parse_args(argv)
    print(f"{'kernel':<40} {'numba s':>10} {'numpy s':>10} {'speedup':>8} {'max diff':>10}")
    for name, fast, slow in cases(args.quick):
        t_fast, a = best_of(fast, args.repeat)
        t_slow, b = best_of(slow, args.repeat)
        print(f"{name:<40} {t_fast:10.4f} {t_slow:10.4f} {t_slow / t_fast:8.1f} {_diff(a, b):10.2e}")


if __name__ == "__main__":
    main()
