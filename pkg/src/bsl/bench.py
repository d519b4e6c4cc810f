"""Micro-benchmarks: binary XNOR conv against the float im2col reference.

Timings are medians over repeated single-threaded calls. The binary path is
timed from its contract inputs (packed activations and kernels); outputs
are checked for exact agreement with the float oracle before any timing.
"""

from __future__ import annotations

import time

import numpy as np

from .binary import BinaryConvPlan, binary_conv2d, fast_path_available, sign, warm_fast_path
from .errors import DataError
from .nn import conv2d_forward


def _median_ms(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def bench_conv(
    kernels: tuple[int, ...] = (2, 3, 5),
    in_channels: int = 64,
    image: int = 32,
    filters: int = 64,
    reps: int = 10,
    seed: int = 0,
) -> list[dict]:
    """Benchmark one conv shape per kernel size; returns report rows."""
    fast = fast_path_available()
    if fast:
        warm_fast_path()
    rng = np.random.default_rng(seed)
    rows = []
    for k in kernels:
        x = sign(rng.standard_normal((1, in_channels, image, image)).astype(np.float32))
        w = sign(rng.standard_normal((filters, in_channels, k, k)).astype(np.float32))
        plan = BinaryConvPlan.build(1, in_channels, image, image, filters, k)
        xp = plan.pack_input(x)
        wp = plan.pack_kernels(w)

        oracle = conv2d_forward(x, w)
        got = binary_conv2d(xp, wp, plan).astype(np.float32)
        if not np.array_equal(oracle, got):
            raise DataError(f"binary conv diverged from float oracle at kernel {k}")

        binary_conv2d(xp, wp, plan)  # warm this exact shape before timing
        float_ms = _median_ms(lambda: conv2d_forward(x, w), reps)
        binary_ms = _median_ms(lambda: binary_conv2d(xp, wp, plan), reps)
        float_bytes = x.size * 4
        packed_bytes = xp.wire_nbytes
        rows.append(
            {
                "kernel": k,
                "in_channels": in_channels,
                "image": image,
                "filters": filters,
                "reps": reps,
                "float_ms": float_ms,
                "binary_ms": binary_ms,
                "speedup": float_ms / binary_ms,
                "float_bytes": float_bytes,
                "packed_bytes": packed_bytes,
                "size_ratio": float_bytes / packed_bytes,
                "fast_path": fast,
            }
        )
    return rows
