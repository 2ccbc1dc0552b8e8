import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastsls.bench import (
    BENCH_COLUMNS,
    BenchRecord,
    FeasibleSampler,
    bench_row,
    fit_loglog_slope,
    iteration_columns,
    iteration_row,
    iteration_study,
    scaling_slope,
    scaling_study,
)
from fastsls.errors import InvalidParameter, SamplingExhausted
from fastsls.fast_sls import solve


def _rec(N, t, status="converged", nx=2):
    return BenchRecord("x", 1, N, nx, 1, 0.0, t, t, 1, status, 0, 0)


def test_slope_of_exact_power_law():
    N = [10, 20, 40, 80]
    assert fit_loglog_slope(N, [3e-6 * n ** 2 for n in N]) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(p=st.floats(0.5, 4.0), c=st.floats(1e-6, 1e2))
def test_slope_recovers_exponent(p, c):
    N = [5, 10, 20, 40]
    assert fit_loglog_slope(N, [c * n ** p for n in N]) == pytest.approx(p, abs=1e-9)


def test_median_ignores_one_outlier():
    N = [10, 10, 10, 20, 20, 20]
    t = [1.0, 1.0, 50.0, 4.0, 4.0, 4.0]
    assert fit_loglog_slope(N, t) == pytest.approx(2.0, abs=1e-12)


def test_single_point_has_no_slope():
    assert fit_loglog_slope([10, 10], [1.0, 2.0]) is None
    assert scaling_slope([_rec(10, 1.0)], "horizon") is None


def test_slope_skips_unconverged():
    recs = [_rec(10, 1.0), _rec(20, 4.0), _rec(40, 1.0, status="max-iter")]
    assert scaling_slope(recs, "horizon") == pytest.approx(2.0, abs=1e-12)


def test_record_validation():
    with pytest.raises(InvalidParameter):
        BenchRecord("x", 1, 5, 2, 1, -1.0, 0.0, 0.0, 1, "converged", 0, 0)
    with pytest.raises(InvalidParameter):
        _rec(5, 1.0, status="ok")


def test_bench_row_log_columns():
    row = bench_row(_rec(100, 1e-3))
    assert tuple(row) == BENCH_COLUMNS
    assert row["log10_N"] == pytest.approx(2.0) and row["log10_t_riccati"] == pytest.approx(-3.0)


def test_scaling_study_grid_and_labels():
    recs = scaling_study("horizon", [3, 5], fixed=1, reps=2)
    assert [r.label for r in recs] == ["msd-L1-N3"] * 2 + ["msd-L1-N5"] * 2
    assert all(r.iterations == 1 and r.status == "converged" for r in recs)
    assert all(r.t_total >= r.t_riccati >= 0 for r in recs)
    states = scaling_study("states", [1, 2], fixed=4, reps=1)
    assert [r.nx for r in states] == [2, 4]


@pytest.mark.parametrize("kw", [dict(mode="x", grid=[1]), dict(mode="horizon", grid=[0]),
                                dict(mode="horizon", grid=[1], reps=0), dict(mode="horizon", grid=[])])
def test_scaling_study_rejects(kw):
    with pytest.raises(InvalidParameter):
        scaling_study(fixed=1, **kw)


def test_sampler_accepts_only_feasible(msd1):
    s = FeasibleSampler(msd1)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x0 = s.draw(rng)
        assert np.abs(x0).max() <= 4.0
        assert solve(msd1, x0).status in ("converged", "max-iter")
    assert s.accepted == 5 and s.draws >= 5


def test_sampler_exhausts_on_hopeless_box(msd1):
    s = FeasibleSampler(msd1, box=1e3, max_draws=50, min_acceptance=0.5)
    with pytest.raises(SamplingExhausted):
        s.draw(np.random.default_rng(0))
    assert s.draws == 50


def test_sampler_needs_a_box(msd1):
    with pytest.raises(InvalidParameter):
        FeasibleSampler(msd1, box=0.0)


def test_iteration_study_deterministic(msd1):
    a = iteration_study(msd1, 6, seed=4)
    b = iteration_study(msd1, 6, seed=4, parallel_trials=2)
    assert [iteration_row(r) for r in a] == [iteration_row(r) for r in b]
    assert [r.trial for r in a] == list(range(6))
    assert list(iteration_row(a[0])) == iteration_columns(2)


def test_iteration_study_single_trial(msd1):
    (r,) = iteration_study(msd1, 1, seed=0)
    assert r.iterations >= 1
    with pytest.raises(InvalidParameter):
        iteration_study(msd1, 0)
