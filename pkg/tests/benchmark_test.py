import numpy as np
import pandas as pd
import pytest

from src.benchmark import BENCH_COLUMNS, loglog_slope, quadratic_baseline, run_bench, scan_fwd_bwd, write_bench


def test_loglog_slope_recovers_power_laws():
    lengths = [256, 512, 1024, 2048]
    assert loglog_slope(lengths, [3.0 * n for n in lengths]) == pytest.approx(1.0)
    assert loglog_slope(lengths, [0.01 * n * n for n in lengths]) == pytest.approx(2.0)


def test_quadratic_baseline_rows_are_convex_combinations():
    out = quadratic_baseline(32, d=8)
    assert out.shape == (32, 8)
    x = np.random.default_rng(0).standard_normal((32, 8))
    assert np.all(out.max(axis=0) <= x.max(axis=0) + 1e-12)
    assert np.all(out.min(axis=0) >= x.min(axis=0) - 1e-12)


def test_scan_memory_of_both_strategies():
    cached = scan_fwd_bwd(64, "cache_all", d=4, n=4)
    recompute = scan_fwd_bwd(64, "recompute", d=4, n=4)
    state = 4 * 4 * 8
    assert cached.recorded_state_bytes == 64 * state
    assert recompute.recorded_state_bytes == state
    assert recompute.peak_backward_state_bytes < cached.peak_backward_state_bytes


def test_run_bench_table(tmp_path):
    df = run_bench([32, 64], repeats=1, d=4, n=4, quad_d=8)
    assert list(df.columns) == BENCH_COLUMNS
    assert df["L"].tolist() == [32, 64]
    assert (df["scan_ms"] > 0).all()
    assert (df["scan_peak_bytes_recompute"] < df["scan_peak_bytes_cached"]).all()
    path = write_bench(df, str(tmp_path / "out" / "bench.csv"))
    assert pd.read_csv(path)["L"].tolist() == [32, 64]


def test_run_bench_rejects_zero_repeats():
    with pytest.raises(ValueError):
        run_bench([32], repeats=0)


@pytest.mark.slow
def test_scan_scales_linearly_and_baseline_quadratically():
    df = run_bench([256, 512, 1024, 2048, 4096], repeats=3)
    assert 0.8 <= loglog_slope(df["L"], df["scan_ms"]) <= 1.2
    assert loglog_slope(df["L"][2:], df["quad_ms"][2:]) > 1.5
