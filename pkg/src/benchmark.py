"""
Scan scaling benchmark.

Times the selective scan (forward + backward, recompute strategy) against a
quadratic pairwise-score baseline and records the state-trajectory footprint
of both scan strategies.
"""

import logging
import statistics
import time
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.special import softmax

from src.ssm_kernel import ScanMemory, fused_selective_scan
from src.tensor_core import Tape, Tensor, mul, sum_all
from src.utils import ensure_parent

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)
BENCH_COLUMNS = ["L", "scan_ms", "quad_ms", "scan_peak_bytes_recompute", "scan_peak_bytes_cached"]


def _scan_inputs(length: int, batch: int, d: int, n: int, seed: int):
    rng = np.random.default_rng(seed)

    def _leaf(shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    return (
        _leaf((batch, length, d), 0.01, 0.2),
        _leaf((d, n), -2.0, -0.1),
        _leaf((batch, length, n)),
        _leaf((batch, length, n)),
        _leaf((batch, length, d)),
        rng.standard_normal((batch, length, d)),
    )


def scan_fwd_bwd(length: int, strategy: str = "recompute", batch: int = 1, d: int = 16, n: int = 16,
                 seed: int = 0) -> ScanMemory:
    """One forward + backward pass of the fused scan; returns its byte accounting."""
    delta, a, b_in, c, x, weights = _scan_inputs(length, batch, d, n, seed)
    memory = ScanMemory()
    with Tape() as tape:
        y = fused_selective_scan(delta, a, b_in, c, x, "euler_b", strategy, memory)
        loss = sum_all(mul(y, Tensor(weights)))
    tape.backward(loss)
    return memory


def quadratic_baseline(length: int, d: int = 64, seed: int = 0) -> np.ndarray:
    """softmax(x xᵀ / sqrt(d)) x, an O(L²·d) pairwise-score mixer."""
    x = np.random.default_rng(seed).standard_normal((length, d))
    scores = x @ x.T / np.sqrt(d)
    return softmax(scores, axis=-1) @ x


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def loglog_slope(lengths: Sequence[int], values: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)), np.log(np.asarray(values)), 1)
    return float(slope)


def run_bench(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    repeats: int = 5,
    batch: int = 1,
    d: int = 16,
    n: int = 16,
    quad_d: int = 64,
) -> pd.DataFrame:
    """One row per length with median timings and peak state bytes."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    rows: List[Dict] = []
    for length in lengths:
        scan_ms = _median_ms(lambda: scan_fwd_bwd(length, "recompute", batch, d, n), repeats)
        quad_ms = _median_ms(lambda: quadratic_baseline(length, quad_d), repeats)
        recompute = scan_fwd_bwd(length, "recompute", batch, d, n)
        cached = scan_fwd_bwd(length, "cache_all", batch, d, n)
        row = {
            "L": int(length),
            "scan_ms": scan_ms,
            "quad_ms": quad_ms,
            "scan_peak_bytes_recompute": max(recompute.recorded_state_bytes, recompute.peak_backward_state_bytes),
            "scan_peak_bytes_cached": max(cached.recorded_state_bytes, cached.peak_backward_state_bytes),
        }
        rows.append(row)
        logger.info(
            f"[BENCH] L={length} scan={scan_ms:.2f}ms quad={quad_ms:.2f}ms "
            f"bytes recompute={row['scan_peak_bytes_recompute']:,} cached={row['scan_peak_bytes_cached']:,}"
        )

    df = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    if len(df) >= 2:
        logger.info(
            f"[BENCH] log-log slope scan={loglog_slope(df['L'], df['scan_ms']):.3f} "
            f"quad={loglog_slope(df['L'], df['quad_ms']):.3f}"
        )
    return df


def write_bench(df: pd.DataFrame, path: str) -> str:
    ensure_parent(path)
    df.to_csv(path, index=False)
    return path
