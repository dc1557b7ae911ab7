import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from socialpressure.errors import APrioriBoundError
from socialpressure.finite_system import (InitialCondition, ModelParams, SystemState, apply_opinion,
                                          check_jump_dominance, initial_free_bound_diagnostic, simulate,
                                          simulate_replicas, step, total_rate)
from socialpressure.io import read_csv
from socialpressure.rates import RateFunction
from socialpressure.rng import stream

TANH = RateFunction.tanh_plus_one()
EXP = RateFunction.exponential()


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=12), st.data())
def test_apply_opinion_map(u, data):
    N = len(u)
    a = data.draw(st.integers(0, N - 1))
    o = data.draw(st.sampled_from([1, -1]))
    h = data.draw(st.floats(0.01, 5))
    s = SystemState.initial(u)
    new = apply_opinion(s, a, o, h, N)
    expect = np.array(u) + o * h / N
    expect[a] = 0.0
    assert np.allclose(new.pressures, expect, atol=1e-12)
    assert new.total_jumps == 1 and new.jump_counts[a] == 1
    assert np.array_equal(s.pressures, np.array(u))   # input untouched


def test_apply_opinion_rejects_bad_arguments():
    s = SystemState.initial([0.0, 0.0])
    with pytest.raises(IndexError):
        apply_opinion(s, 2, 1, 1.0, 2)
    with pytest.raises(ValueError):
        apply_opinion(s, 0, 0, 1.0, 2)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(N=1, h=1, rf=TANH, T=1)
    with pytest.raises(ValueError):
        ModelParams(N=5, h=0, rf=TANH, T=1)
    with pytest.raises(ValueError):
        ModelParams(N=5, h=1, rf=TANH, T=0)


def test_initial_conditions():
    rng = stream(0, "t")
    assert np.all(InitialCondition.constant(-0.5).sample(4, rng) == -0.5)
    u = InitialCondition.iid_uniform(2.0).sample(1000, rng)
    assert np.all(np.abs(u) <= 2.0)
    two = InitialCondition.iid_two_point(1.0).sample(1000, rng)
    assert set(np.unique(two)) == {-1.0, 1.0}
    assert InitialCondition.iid_two_point(1.0).symmetric and not InitialCondition.constant(1.0).symmetric
    with pytest.raises(ValueError):
        InitialCondition.custom([1.0, 2.0]).sample(3, rng)


def test_total_rate_tanh():
    assert total_rate(SystemState.initial(np.linspace(-3, 3, 7)), TANH) == pytest.approx(14.0)


def test_simulate_is_deterministic():
    p = ModelParams(N=30, h=1.0, rf=EXP, T=2.0, seed=11, initial=InitialCondition.iid_uniform(1.0))
    a, b = simulate(p, 3), simulate(p, 3)
    assert np.array_equal(a.event_times, b.event_times)
    assert np.array_equal(a.final_state.pressures, b.final_state.pressures)
    c = simulate(p, 4)
    assert not np.array_equal(a.event_times, c.event_times)


@pytest.mark.parametrize("rf,h", [(TANH, 2.0), (EXP, 0.7)])
def test_events_replay_to_final_state(rf, h):
    p = ModelParams(N=15, h=h, rf=rf, T=3.0, seed=2, initial=InitialCondition.iid_uniform(0.5),
                    check_bounds="events")
    tr = simulate(p)
    assert np.all(np.diff(tr.event_times) > 0)
    s = SystemState.initial(tr.initial_pressures)
    for ev in tr.events():
        s = apply_opinion(s, ev.actor, ev.opinion, h, p.N)
    assert np.allclose(s.pressures, tr.final_state.pressures, atol=1e-12)
    assert s.total_jumps == tr.final_state.total_jumps
    assert np.array_equal(s.jump_counts, tr.final_state.jump_counts)


def test_pathwise_bound_on_grid():
    p = ModelParams(N=20, h=1.5, rf=EXP, T=2.0, seed=4, initial=InitialCondition.iid_uniform(1.0),
                    record_pressures=True, grid_points=101)
    for tr in simulate_replicas(p, 10):
        rhs = p.L + p.h * tr.total_jumps / p.N
        assert np.all(np.max(np.abs(tr.pressures), axis=1) <= rhs * (1 + 1e-9))
        assert tr.mean_pressure == pytest.approx(tr.pressures.mean(axis=1))


def test_bound_violation_is_detected():
    # an initial law outside the declared support breaks |U| <= L + hZ/N at t = 0
    bad = InitialCondition("custom", 0.1, values=(1.0, 1.0, 1.0))
    with pytest.raises(APrioriBoundError):
        simulate(ModelParams(N=3, h=1.0, rf=TANH, T=1.0, initial=bad))


def test_tanh_jump_count_is_poisson():
    # Phi == 2, so Z_T ~ Poisson(2 N T) whatever the dynamics
    p = ModelParams(N=10, h=2.0, rf=TANH, T=1.5, seed=5, record_events=False, grid_points=2)
    Z = np.array([tr.final_state.total_jumps for tr in simulate_replicas(p, 400)])
    lam = 2 * 10 * 1.5
    assert abs(Z.mean() - lam) < 4 * math.sqrt(lam / 400)
    assert stats.kstest(Z, stats.poisson(lam).cdf).pvalue > 1e-3


def test_fast_path_agrees_with_step_in_law():
    # reference: the generic single-step routine
    p = ModelParams(N=8, h=1.0, rf=EXP, T=1.0, seed=6, initial=InitialCondition.iid_uniform(1.0))
    Z_sim = [tr.final_state.total_jumps for tr in simulate_replicas(p, 300)]
    Z_step = []
    for r in range(300):
        rng = stream(99, "step", r)
        s = SystemState.initial(InitialCondition.iid_uniform(1.0).sample(8, rng))
        while True:
            new, ev = step(s, EXP, p, rng)
            if ev is None or new.t > p.T:
                break
            s = new
        Z_step.append(s.total_jumps)
    assert stats.ks_2samp(Z_sim, Z_step).pvalue > 0.01


def test_rates_recorded():
    p = ModelParams(N=50, h=2.0, rf=TANH, T=1.0, record_rates=True, grid_points=11)
    tr = simulate(p)
    assert np.allclose(tr.a_plus + tr.a_minus, 2.0)
    assert tr.a_plus[0] == 1.0


def test_trajectory_csv(tmp_path):
    p = ModelParams(N=4, h=1.0, rf=TANH, T=1.0, grid_points=5, record_pressures=True)
    tr = simulate(p)
    tr.to_csv(tmp_path / "t.csv", ["seed=0"])
    cols, data = read_csv(tmp_path / "t.csv")
    assert cols == ["t", "mean_pressure", "total_jumps", "u_0", "u_1", "u_2", "u_3"]
    assert np.array_equal(data[:, 1], tr.mean_pressure)
    tr.events_to_csv(tmp_path / "e.csv")
    cols, data = read_csv(tmp_path / "e.csv")
    assert cols == ["time", "actor", "opinion"] and len(data) == len(tr.event_times)


def test_jump_dominance():
    p = ModelParams(N=30, h=1.0, rf=EXP, T=1.0, seed=3, initial=InitialCondition.iid_uniform(1.0))
    rep = check_jump_dominance(p, 200)
    assert rep.passed
    assert rep.mean_bound == pytest.approx(1 + 2 * 2 * math.cosh(2.0))
    assert check_jump_dominance(p, 100, t=0.0).degenerate
    with pytest.raises(ValueError):
        check_jump_dominance(p, 50)


def _diagnostic_oracle(t, s, h):
    w = mpmath.mpf(t - s)
    inner = mpmath.quad(lambda y: mpmath.acosh(y / 2) * w * mpmath.exp(-w * y), [2, 10, mpmath.inf])
    return float(inner + h + h * w * 2 * mpmath.cosh(2 * h))


def test_initial_free_bound_diagnostic():
    got = initial_free_bound_diagnostic(EXP, 2.0, 0.5, 0.3, 100)
    assert got == pytest.approx(_diagnostic_oracle(2.0, 0.5, 0.3), rel=1e-9)
    # frozen value of the same oracle (mpmath, 15 digits)
    assert initial_free_bound_diagnostic(EXP, 1.0, 0.0, 1.0, 10) == pytest.approx(8.638285254916797, rel=1e-10)
    assert math.isinf(initial_free_bound_diagnostic(TANH, 2.0, 0.5, 0.3, 100))
    assert math.isinf(initial_free_bound_diagnostic(EXP, 1.0, 1.0, 0.3, 100))
    with pytest.raises(ValueError):
        initial_free_bound_diagnostic(EXP, 1.0, 2.0, 0.3, 100)
