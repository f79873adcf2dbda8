"""Runtime comparison of the gather kernel against the dense masked oracle."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .attention import (
    AttentionSpec,
    QkvParams,
    build_neighborhood_mask,
    dina_forward,
    neighbor_table,
    oracle_masked_attention,
)
from .errors import DilatedUNetError
from .rng import Rng

GUARD_TOLERANCE = 1e-5


class BenchGuardError(DilatedUNetError):
    """Kernel output disagreed with the oracle, so timings would be meaningless."""


def _random_params(spec: AttentionSpec, rng: Rng) -> QkvParams:
    d = spec.dim

    def t(*shape):
        return T.Tensor((rng.normal(int(np.prod(shape))).reshape(shape) * 0.5).astype(np.float32))

    side = spec.bias_side
    return QkvParams(t(d, d), t(d, d), t(d, d), t(d, d), t(d), t(spec.heads, side, side))


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(sizes, k: int, deltas, heads: int = 2, head_dim: int = 8,
              repeats: int = 5, seed: int = 0) -> list[dict]:
    """Verify then time each ``(size, delta)`` configuration (median seconds)."""
    rng = Rng(seed)
    rows = []
    for size in sizes:
        for delta in deltas:
            spec = AttentionSpec(k, delta, heads, head_dim)
            params = _random_params(spec, rng)
            x = T.Tensor(rng.normal(size * size * spec.dim).reshape(size, size, spec.dim).astype(np.float32))
            mask = build_neighborhood_mask(size, size, k, delta)
            neighbor_table(size, size, k, delta)  # warm the index cache before timing

            with T.no_grad():
                out = dina_forward(x, params, spec).data
            ref = oracle_masked_attention(x, params, mask, spec).data
            err = float(np.abs(out - ref).max())
            if not err < GUARD_TOLERANCE:
                raise BenchGuardError(
                    f"size={size} k={k} delta={delta}: kernel vs oracle max abs diff {err:.3g}"
                )

            def kernel():
                with T.no_grad():
                    dina_forward(x, params, spec)

            kernel_s = _median_time(kernel, repeats)
            dense_s = _median_time(lambda: oracle_masked_attention(x, params, mask, spec), repeats)
            rows.append({
                "size": size, "k": k, "delta": delta, "heads": heads, "head_dim": head_dim,
                "kernel_seconds": kernel_s, "dense_seconds": dense_s,
                "speedup": dense_s / kernel_s if kernel_s > 0 else None,
                "max_abs_diff": err,
            })
    return rows
