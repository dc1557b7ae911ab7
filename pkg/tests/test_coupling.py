import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from socialpressure.coupling import (ErrorTable, SharedPoissonStream, coupled_run, dominating_rate, fit_rate,
                                     strong_error_curve)
from socialpressure.finite_system import InitialCondition, ModelParams, initial_pressures
from socialpressure.limit_sde import DriftCurve, PicardConfig, picard_solve
from socialpressure.rates import RateFunction

TANH = RateFunction.tanh_plus_one()
EXP = RateFunction.exponential()


def _drift(rf, h, init, T, seed=0):
    return picard_solve(rf, h, init, T, PicardConfig(M=4000, K=32), seed=seed)


def _brute_errors(params, drift, replica, levels, grid_points=20001):
    """Event by event replay on the same candidates, errors on a fine grid
    plus both sides of every candidate (a lower bound of the exact sup)."""
    N, h, T = params.N, params.h, params.T
    phi = params.rf.scalar_phi()
    key = params.seed * 1_000_003 + replica
    events = []
    for a in range(N):
        for o in (1, -1):
            s = SharedPoissonStream(key, a, o, levels[0])
            for lv in levels[1:]:
                s.extend(lv)
            t, z = s.points(T)
            events += [(ti, zi, a, o) for ti, zi in zip(t.tolist(), z.tolist())]
    events.sort(key=lambda e: e[0])
    U = np.array(initial_pressures(params, replica), dtype=float)
    base = U.copy()
    err = np.zeros(N)
    grid = np.linspace(0.0, T, grid_points)
    gi = 0

    def observe(t):
        np.maximum(err, np.abs(U - (base + h * drift.integrated(t))), out=err)

    for s, z, a, o in events:
        while gi < len(grid) and grid[gi] < s:
            observe(grid[gi])
            gi += 1
        observe(s)
        hi = h * drift.integrated(s)
        acc_f = z <= phi(o * U[a])
        acc_l = z <= phi(o * (base[a] + hi))
        if acc_f:
            U += o * h / N
            U[a] = 0.0
        if acc_l:
            base[a] = -hi
        observe(s)
    while gi < len(grid):
        observe(grid[gi])
        gi += 1
    return err


# -- shared streams ---------------------------------------------------------

def test_stream_replay_is_deterministic():
    a = SharedPoissonStream(3, 1, -1, 2.5)
    b = SharedPoissonStream(3, 1, -1, 2.5)
    ta, za = a.points(7.0)
    tb, zb = b.points(7.0)
    assert np.array_equal(ta, tb) and np.array_equal(za, zb)
    assert np.all(np.diff(ta) >= 0) and np.all((za >= 0) & (za <= 2.5))
    seq = [a.next() for _ in range(10)]
    a.reset()
    assert [a.next() for _ in range(10)] == seq
    assert [s for s, _ in seq] == ta[:10].tolist()


def test_stream_horizon_is_prefix_consistent():
    s = SharedPoissonStream(0, 0, 1, 4.0)
    t1, z1 = s.points(2.0)
    t2, z2 = s.points(10.0)
    k = len(t1)
    assert np.array_equal(t2[:k], t1) and np.array_equal(z2[:k], z1)
    fresh_t, _ = SharedPoissonStream(0, 0, 1, 4.0).points(10.0)
    assert np.array_equal(fresh_t, t2)


def test_stream_keys_are_independent():
    t1, _ = SharedPoissonStream(0, 0, 1, 3.0).points(5.0)
    t2, _ = SharedPoissonStream(0, 0, -1, 3.0).points(5.0)
    t3, _ = SharedPoissonStream(0, 1, 1, 3.0).points(5.0)
    assert not np.array_equal(t1[:5], t2[:5]) and not np.array_equal(t1[:5], t3[:5])


def test_stream_extend_keeps_old_points():
    s = SharedPoissonStream(1, 2, 1, 1.0)
    t0, z0 = s.points(20.0)
    s.extend(3.0)
    assert s.dominating_rate == 3.0
    t1, z1 = s.points(20.0)
    old = z1 <= 1.0
    assert np.array_equal(t1[old], t0) and np.array_equal(z1[old], z0)
    assert np.all(z1[~old] <= 3.0)
    with pytest.raises(ValueError):
        s.extend(2.0)
    with pytest.raises(ValueError):
        SharedPoissonStream(0, 0, 1, 0.0)


def test_stream_counts_are_poisson():
    """Counts on unit intervals below a mark level are Poisson(level)."""
    level, T = 1.5, 4000.0
    s = SharedPoissonStream(11, 0, 1, 2.0)
    s.extend(4.0)
    t, z = s.points(T)
    counts = np.bincount(t[z <= level].astype(int), minlength=int(T))[:int(T)]
    kmax = 8
    obs = np.array([np.sum(counts == k) for k in range(kmax)] + [np.sum(counts >= kmax)])
    p = stats.poisson.pmf(np.arange(kmax), level)
    exp = T * np.append(p, 1 - p.sum())
    assert stats.chisquare(obs, exp).pvalue > 0.001
    # marks uniform on [0, Lambda]
    assert stats.kstest(z / 4.0, "uniform").pvalue > 0.001


# -- coupled runs -------------------------------------------------------------

def _params(rf, h, N, T, seed, init=None):
    return ModelParams(N=N, h=h, rf=rf, T=T, seed=seed, initial=init or InitialCondition.iid_uniform(1.0),
                       record_events=False)


def test_self_coupling_is_exact():
    init = InitialCondition.iid_uniform(1.0)
    drift = _drift(TANH, 2.0, init, 2.0)
    for r in range(3):
        res = coupled_run(_params(TANH, 2.0, 15, 2.0, 4, init), drift, replica=r, reference="limit")
        assert np.all(res.errors == 0.0)
        assert res.finite_total_jumps == res.limit_total_jumps


def test_coupled_run_is_bit_identical_and_starts_together():
    init = InitialCondition.iid_uniform(1.0)
    drift = _drift(TANH, 1.0, init, 2.0)
    p = _params(TANH, 1.0, 20, 2.0, 5, init)
    a = coupled_run(p, drift, replica=2)
    b = coupled_run(p, drift, replica=2)
    assert np.array_equal(a.errors, b.errors) and a.finite_total_jumps == b.finite_total_jumps
    assert np.all(a.initial_errors == 0.0)
    c = coupled_run(p, drift, replica=3)
    assert not np.array_equal(a.errors, c.errors)
    with pytest.raises(ValueError):
        coupled_run(p, drift, reference="other")
    with pytest.raises(ValueError):
        coupled_run(_params(TANH, 1.0, 20, 5.0, 5, init), drift)


@pytest.mark.parametrize("rf,h,N,T,seed", [(TANH, 2.0, 12, 2.0, 1), (TANH, 0.5, 8, 3.0, 2),
                                           (EXP, 0.5, 10, 1.0, 3)])
def test_sup_errors_match_brute_force(rf, h, N, T, seed):
    init = InitialCondition.iid_uniform(1.0)
    drift = _drift(rf, h, init, T, seed)
    p = _params(rf, h, N, T, seed, init)
    res = coupled_run(p, drift, replica=1)
    brute = _brute_errors(p, drift, 1, res.rate_levels)
    # the grid oracle can only miss interior peaks of size ~ h * |drift'| * dt
    slack = h * float(np.max(np.abs(drift.a_plus - drift.a_minus))) * T / 20000
    assert np.all(brute <= res.errors + 1e-12)
    assert np.all(res.errors - brute <= slack + 1e-12)
    assert res.errors.max() > 0


def test_sup_errors_match_brute_force_after_rate_raise():
    init = InitialCondition.iid_uniform(1.0)
    h, T, N = 2.0, 1.0, 12
    drift = _drift(EXP, h, init, T, 6)
    for seed in range(6, 30):
        p = _params(EXP, h, N, T, seed, init)
        res = coupled_run(p, drift, replica=0)
        if res.raises:
            break
    else:
        pytest.fail("no run needed a rate raise")
    assert len(res.rate_levels) == res.raises + 1
    brute = _brute_errors(p, drift, 0, res.rate_levels)
    assert np.all(brute <= res.errors + 1e-12)
    assert np.max(res.errors - brute) < 1e-2


def test_conservative_rate_dominates_adaptive_start():
    init = InitialCondition.iid_uniform(1.0)
    p = _params(EXP, 0.5, 20, 1.0, 0, init)
    drift = _drift(EXP, 0.5, init, 1.0)
    res = coupled_run(p, drift)
    assert dominating_rate(p) >= res.dominating_rate
    assert dominating_rate(_params(TANH, 2.0, 20, 1.0, 0)) == 2.0


def test_error_shrinks_with_N():
    init = InitialCondition.constant(1.0)
    drift = picard_solve(TANH, 0.5, init, 2.0, PicardConfig(M=20000, K=64), seed=1)
    small = np.mean([coupled_run(_params(TANH, 0.5, 50, 2.0, 9, init), drift, r).mean_error for r in range(50)])
    large = np.mean([coupled_run(_params(TANH, 0.5, 400, 2.0, 9, init), drift, r).mean_error for r in range(50)])
    assert large < small


# -- error curve and fit --------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(slope=st.floats(-2.0, 2.0), c=st.floats(0.01, 10.0))
def test_fit_rate_recovers_power_laws(slope, c):
    rows = [(N, c * N ** slope, 0.0, 10) for N in (25, 50, 100, 200, 400)]
    s, b, r2 = fit_rate(rows)
    assert s == pytest.approx(slope, abs=1e-9)
    assert b == pytest.approx(math.log(c), abs=1e-8)
    assert r2 == pytest.approx(1.0, abs=1e-9)


def test_fit_rate_known_values():
    # log-error 0, -1, -1 at log N 0, 1, 2: slope -1/2, intercept -1/6, r2 3/4
    rows = [(1.0, 1.0, 0, 1), (math.e, math.exp(-1), 0, 1), (math.e ** 2, math.exp(-1), 0, 1)]
    s, b, r2 = fit_rate(ErrorTable(rows))
    assert s == pytest.approx(-0.5) and b == pytest.approx(-1 / 6) and r2 == pytest.approx(0.75)


def test_fit_rate_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_rate([(10, 0.1, 0, 1)])
    with pytest.raises(ValueError):
        fit_rate([(10, 0.1, 0, 1), (20, 0.0, 0, 1)])


def test_strong_error_curve_table(tmp_path):
    init = InitialCondition.constant(1.0)
    drift = _drift(TANH, 0.5, init, 1.0)
    t1 = strong_error_curve(TANH, 0.5, init, 1.0, [10, 40], 6, seed=2, drift=drift)
    t2 = strong_error_curve(TANH, 0.5, init, 1.0, [10, 40], 6, seed=2, drift=drift, workers=2)
    assert t1.rows == t2.rows
    assert list(t1.Ns) == [10, 40] and np.all(t1.means > 0)
    assert all(r[3] == 6 and r[2] > 0 for r in t1.rows)
    t1.to_csv(tmp_path / "e.csv", ["x=1"])
    text = (tmp_path / "e.csv").read_text()
    assert text.startswith("# x=1") and "N,mean_sup_error,std_error,replicas" in text
    with pytest.raises(ValueError):
        strong_error_curve(TANH, 0.5, init, 1.0, [10], 3, drift=drift)
    with pytest.raises(ValueError):
        strong_error_curve(TANH, 0.5, init, 1.0, [5, 40], 3, drift=drift)


def test_drift_constant_coupling_single_actor_oracle():
    """Zero drift: both sides are piecewise constant, so the replay is exact."""
    drift = DriftCurve.constant(1.0, 1.0, 2.0)
    p = ModelParams(N=2, h=1.0, rf=TANH, T=2.0, seed=0, initial=InitialCondition.constant(0.0),
                    record_events=False)
    res = coupled_run(p, drift)
    brute = _brute_errors(p, drift, 0, res.rate_levels)
    assert np.allclose(res.errors, brute, atol=1e-12)
