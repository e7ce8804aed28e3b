"""Timing comparison of the numpy and compiled kernel backends.

Runs the two hot entry points (batched forward, loss-plus-gradient) over
a grid of batch sizes and widths and reports per-call times. Usage:

    python3 benchmarks/bench_kernels.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from metacate import nn


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def run(repeats: int) -> None:
    backends = ["numpy"]
    try:
        nn.set_backend("cython")
        backends.append("cython")
    except Exception as exc:
        print(f"compiled backend unavailable ({exc}); timing numpy only")

    grid = [
        (32, 32, 1),
        (64, 64, 2),
        (256, 64, 2),
        (256, 128, 3),
    ]
    rng = np.random.default_rng(0)
    header = f"{'batch':>6} {'hidden':>6} {'blocks':>6} {'op':>10}"
    for name in backends:
        header += f" {name + ' (us)':>14}"
    if len(backends) == 2:
        header += f" {'speedup':>8}"
    print(header)

    for b, h, n_blocks in grid:
        spec = nn.default_fusion_spec(8, 10, hidden_dim=h, n_residual_blocks=n_blocks)
        params = nn.init_params(spec, 0)
        W = rng.standard_normal((b, 8))
        X = rng.standard_normal((b, 10))
        T = rng.standard_normal((b, 1))
        for op, make in (
            ("forward", lambda: nn.forward_batch(params, W, X)),
            ("loss+grad", lambda: nn.loss_and_grad(params, (W, X, T))),
        ):
            times = []
            for name in backends:
                nn.set_backend(name)
                times.append(_time(make, repeats))
            row = f"{b:>6} {h:>6} {n_blocks:>6} {op:>10}"
            for t in times:
                row += f" {t * 1e6:>14.1f}"
            if len(times) == 2:
                row += f" {times[0] / times[1]:>7.2f}x"
            print(row)
    nn.set_backend("numpy")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=200)
    run(ap.parse_args().repeats)
