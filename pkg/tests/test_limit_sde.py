import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from socialpressure.errors import DominatingRateError, PicardConvergenceError
from socialpressure.finite_system import InitialCondition
from socialpressure.invariant import solve_gamma
from socialpressure.limit_sde import (DriftCurve, PicardConfig, apriori_gamma, contraction_report, picard_solve,
                                      sample_limit_path)
from socialpressure.rates import RateFunction
from socialpressure.rng import stream

TANH = RateFunction.tanh_plus_one()
EXP = RateFunction.exponential()


def test_apriori_gamma():
    assert apriori_gamma(1.0, 3.0, 2.0, TANH) == 26.0
    assert apriori_gamma(0.7, 0.0, 2.0, EXP) == 1.4
    with pytest.raises(ValueError):
        apriori_gamma(1.0, -1.0, 1.0, TANH)


def test_drift_curve_validation():
    with pytest.raises(ValueError):
        DriftCurve([0, 1, 1], [1, 1, 1], [1, 1, 1])
    with pytest.raises(ValueError):
        DriftCurve([0.1, 1], [1, 1], [1, 1])
    with pytest.raises(ValueError):
        DriftCurve([0, 1], [1, -1], [1, 1])
    with pytest.raises(ValueError):
        DriftCurve([0, 1], [1, 1, 1], [1, 1])


curves = st.lists(st.tuples(st.floats(0, 3), st.floats(0, 3)), min_size=2, max_size=8)


@given(curves, st.floats(0, 1))
@settings(max_examples=60)
def test_integrated_is_exact_for_the_interpolant(vals, frac):
    grid = np.linspace(0.0, 2.0, len(vals))
    ap, am = np.array(vals).T
    c = DriftCurve(grid, ap, am)
    t = 2.0 * frac
    ref, _ = integrate.quad(c.difference, 0.0, t, points=list(grid), epsabs=1e-13)
    assert c.integrated(t) == pytest.approx(ref, abs=1e-10)
    assert np.allclose(c.integrated(grid), [integrate.quad(c.difference, 0, g, points=list(grid))[0] for g in grid],
                       atol=1e-10)


def test_critical_times_catch_zero_crossings():
    c = DriftCurve([0.0, 1.0, 2.0], [2.0, 0.0, 1.0], [0.0, 2.0, 1.0])
    crit = c.critical_times()
    assert 0.5 in crit and 1.0 in crit


def test_drift_csv_round_trip(tmp_path):
    c = DriftCurve(np.linspace(0, 1, 5), np.random.default_rng(0).random(5), np.full(5, 1 / 3))
    c.to_csv(tmp_path / "d.csv", ["seed=0"])
    back = DriftCurve.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.grid, c.grid) and np.array_equal(back.a_plus, c.a_plus)
    assert np.array_equal(back.a_minus, c.a_minus)
    assert back.sup_distance(c) == 0.0


def test_picard_config_validation():
    with pytest.raises(ValueError):
        PicardConfig(M=999)
    with pytest.raises(ValueError):
        PicardConfig(tol=0.0)
    assert PicardConfig().intervals(2.0) == 1024


def test_zero_drift_path_gets_trapped_at_zero():
    drift = DriftCurve.constant(1.0, 1.0, 5.0)
    rng = stream(1, "trap")
    for _ in range(50):
        p = sample_limit_path(TANH, 1.0, drift, 0.8, 5.0, rng)
        if len(p.jump_times):
            after = np.linspace(p.jump_times[0], 5.0, 50)
            assert np.all(p.value(after) == 0.0)


def test_constant_drift_is_linear_between_jumps():
    drift = DriftCurve.constant(1.3, 0.7, 3.0)     # gamma = 0.6
    p = sample_limit_path(TANH, 2.0, drift, 0.25, 3.0, stream(2, "lin"))
    edges = np.concatenate([[0.0], p.jump_times, [3.0]])
    for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        ts = np.linspace(a, b, 7)[1:-1]
        start = 0.25 if k == 0 else 0.0
        assert np.allclose(p.value(ts), start + 2.0 * 0.6 * (ts - a), atol=1e-12)


def test_limit_paths_respect_apriori_bound():
    T, h, L = 2.0, 1.0, 1.0
    init = InitialCondition.iid_uniform(L)
    drift = picard_solve(EXP, h, init, T, PicardConfig(M=5000, K=64), seed=3)
    gamma = apriori_gamma(L, T, h, EXP)
    rng = stream(3, "bound")
    for u in init.sample(2000, rng):
        assert sample_limit_path(EXP, h, drift, float(u), T, rng, L=L).sup_abs() <= gamma


def test_sup_abs_matches_dense_evaluation():
    drift = DriftCurve([0.0, 1.0, 2.0], [2.0, 0.1, 1.0], [0.1, 2.0, 1.0])
    for seed in range(5):
        p = sample_limit_path(TANH, 1.5, drift, -0.4, 2.0, stream(seed, "sup"))
        dense = np.max(np.abs(p.value(np.linspace(0, 2, 20001))))
        assert p.sup_abs() >= dense - 1e-12
        assert p.sup_abs() == pytest.approx(dense, abs=1e-3)


class _LowStream:
    dominating_rate = 0.5

    def points(self, T):
        return np.array([0.1, 0.2]), np.array([0.3, 0.4])


def test_dominating_rate_breach_aborts():
    with pytest.raises(DominatingRateError):
        sample_limit_path(EXP, 1.0, DriftCurve.constant(1.0, 1.0, 1.0), 3.0, 1.0, _LowStream())


def test_picard_initial_value_exact():
    for rf in (TANH, EXP):
        c = picard_solve(rf, 1.0, InitialCondition.constant(0.0), 1.0, PicardConfig(M=2000, K=16), seed=1)
        assert c.a_plus[0] == rf.phi(0.0) and c.a_minus[0] == rf.phi(0.0)


def test_picard_tanh_total_rate_and_symmetry():
    c = picard_solve(TANH, 0.8, InitialCondition.iid_two_point(1.0), 2.0, PicardConfig(M=20000, K=64), seed=2)
    assert np.allclose(c.a_plus + c.a_minus, 2.0, atol=1e-12)
    # a_plus + a_minus == 2, so the difference has standard error 2 * se; the
    # imbalance of the sampled initial law persists along the paths, so the
    # t = 0 error is the right scale for the whole curve
    assert np.all(np.abs(c.a_plus - c.a_minus) < 4 * 2 * c.a_plus_se.max())


def test_picard_is_reproducible():
    cfg = PicardConfig(M=3000, K=32)
    a = picard_solve(EXP, 0.5, InitialCondition.iid_uniform(1.0), 1.0, cfg, seed=4)
    b = picard_solve(EXP, 0.5, InitialCondition.iid_uniform(1.0), 1.0, cfg, seed=4)
    assert np.array_equal(a.a_plus, b.a_plus) and np.array_equal(a.a_minus, b.a_minus)


def test_picard_residuals_contract():
    T, h, L = 5.0, 0.5, 1.0
    c = picard_solve(TANH, h, InitialCondition.constant(L), T, PicardConfig(M=20000, K=320, tol=1e-7), seed=5)
    bound = max(contraction_report(TANH, h, L, T).c_t_star, 0.9)
    for w in c.residuals:
        if not w["converged"]:
            continue
        res = w["residuals"]
        assert len(res) >= 4
        assert all(b < a for a, b in zip(res[1:], res[2:]))
        ratios = [b / a for a, b in zip(res, res[1:])]
        assert np.mean([r <= bound for r in ratios]) >= 0.8


def test_picard_integral_bound():
    T, h, L = 3.0, 1.0, 1.0
    init = InitialCondition.iid_uniform(L)
    c = picard_solve(EXP, h, init, T, PicardConfig(M=5000, K=96), seed=6)
    rng = stream(6, "integral")
    grid = np.linspace(0, T, 97)
    vals = []
    for u in init.sample(2000, rng):
        p = sample_limit_path(EXP, h, c, float(u), T, rng, L=L)
        U = p.value(grid)
        vals.append(np.trapezoid(np.abs(U) * EXP.big_phi(U), grid))
    vals = np.array(vals)
    sigma = vals.std() / math.sqrt(len(vals))
    assert vals.mean() <= 2 * L + 2 * h * T * EXP.m_less(2 * h) + 4 * sigma


def test_picard_convergence_failure_carries_residuals():
    cfg = PicardConfig(M=2000, K=32, tol=1e-14, max_iter=2)
    with pytest.raises(PicardConvergenceError) as err:
        picard_solve(TANH, 2.0, InitialCondition.constant(1.0), 2.0, cfg, seed=7)
    assert err.value.residuals and all(not w["converged"] for w in err.value.residuals)


def test_long_run_drift_matches_fixed_point():
    # positive basin: h (a_plus - a_minus) approaches h gamma*
    h, T = 2.0, 10.0
    c = picard_solve(TANH, h, InitialCondition.constant(1.0), T, PicardConfig(M=40000, K=200), seed=8)
    g = solve_gamma(TANH, h).gamma_star
    d = c.a_plus[-1] - c.a_minus[-1]
    sigma = math.hypot(c.a_plus_se[-1], c.a_minus_se[-1])
    assert abs(h * d - h * g) < h * (4 * sigma + 0.01)


def test_contraction_report():
    rep = contraction_report(TANH, 1e-9, 1.0, 3.0)
    assert rep.t_star == 3.0
    rep = contraction_report(TANH, 2.0, 1.0, 1.0)
    assert 0 < rep.t_star < 1.0 and rep.c_t_star < 1.0
    assert rep.c(rep.t_star * 1.01) >= 1.0
    c = picard_solve(TANH, 2.0, InitialCondition.constant(1.0), rep.t_star,
                     PicardConfig(M=5000, K=32, max_iter=50), seed=9)
    assert all(w["converged"] for w in c.residuals)


@given(st.floats(0, 2), st.floats(0, 2))
def test_contraction_factor_monotone(a, b):
    rep = contraction_report(EXP, 0.5, 1.0, 2.0)
    lo, hi = sorted((a, b))
    assert rep.c(lo) <= rep.c(hi)
    assert rep.c(0.0) == 0.0
