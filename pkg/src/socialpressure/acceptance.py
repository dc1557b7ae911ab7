"""Acceptance experiments, shared by the test suite and ``selftest``.

Each ``criterion_*`` function runs one experiment with pinned seeds and
returns a :class:`CriterionResult`; nothing here asserts.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .coupling import coupled_run, fit_rate, strong_error_curve
from .finite_system import InitialCondition, ModelParams, check_jump_dominance, simulate, simulate_replicas
from .invariant import InvariantDensity, simulate_house_of_cards, solve_gamma
from .limit_sde import PicardConfig, apriori_gamma, picard_solve, sample_limit_path
from .rates import RateFunction
from .rng import stream


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s / {self.budget:.0f}s)"


def _timed(number, name, budget, fn):
    t0 = time.perf_counter()
    ok, detail, data = fn()
    dt = time.perf_counter() - t0
    if dt > budget:
        ok = False
        detail += f"; over time budget"
    return CriterionResult(number, name, bool(ok), detail, dt, budget, data)


TANH = RateFunction.tanh_plus_one()


def criterion_1() -> CriterionResult:
    def run():
        bad = []
        roots = {}
        for h in (0.25, 0.5, 0.9, 1.0):
            sol = solve_gamma(TANH, h)
            roots[h] = sol.roots
            if sol.roots != (0.0,):
                bad.append(h)
        for h in (1.1, 1.5, 2.0, 4.0):
            sol = solve_gamma(TANH, h)
            roots[h] = sol.roots
            pos = sol.positive
            if len(sol.roots) != 3 or len(pos) != 1 or -pos[0] not in sol.roots:
                bad.append(h)
        detail = "roots " + ", ".join(f"h={h}: {len(r)}" for h, r in roots.items())
        return not bad, detail + (f"; wrong at h={bad}" if bad else ""), {"roots": roots}
    return _timed(1, "phase transition at threshold 1", 5, run)


def criterion_2() -> CriterionResult:
    def run():
        worst = 0.0
        for h in (1.5, 2.0, 4.0):
            g = solve_gamma(TANH, h).gamma_star
            dens = InvariantDensity(TANH, h, g)
            m = g * h / 2
            xs = np.linspace(0.0, 10 * g * h, 4001)
            worst = max(worst, float(np.max(np.abs(dens(xs) - np.exp(-xs / m) / m))))
        return worst < 1e-8, f"max abs error {worst:.2e}", {"max_error": worst}
    return _timed(2, "closed-form exponential density", 1, run)


def criterion_3(seed: int = 2024) -> CriterionResult:
    def run():
        h = 2.0
        g = solve_gamma(TANH, h).gamma_star
        burn, spacing, n = 20.0, 1.0, 100_000
        path = simulate_house_of_cards(TANH, h, g, 0.0, burn + spacing * n, seed=seed)
        ys = path.value(burn + spacing * np.arange(1, n + 1))
        ks = stats.kstest(ys, "expon", args=(0.0, g * h / 2)).statistic
        return ks < 0.02, f"KS distance {ks:.4f} over {n} samples", {"ks": ks}
    return _timed(3, "house-of-cards stationarity", 60, run)


def criterion_4(seed: int = 1) -> CriterionResult:
    def run():
        T, N = 15.0, 1000
        low = []
        for r in range(10):
            init = InitialCondition.constant(1.0 if r < 5 else -1.0)
            p = ModelParams(N=N, h=0.5, rf=TANH, T=T, seed=seed, initial=init, grid_points=300, record_events=False)
            low.append(float(simulate(p, replica=r).mean_pressure[-1]))
        plateau = solve_gamma(TANH, 2.0).gamma_star * 2.0 / 2
        p = ModelParams(N=N, h=2.0, rf=TANH, T=T, seed=seed + 1, grid_points=300, record_events=False)
        high = [float(simulate(p, replica=r).mean_pressure[-1]) for r in range(10)]
        near = sum(abs(abs(v) - plateau) <= 0.2 * plateau for v in high)
        signs = {np.sign(v) for v in high}
        ok = all(abs(v) < 0.1 for v in low) and near >= 9 and {-1.0, 1.0} <= signs
        detail = (f"h=0.5 max |mean| {max(abs(v) for v in low):.3f}; h=2 {near}/10 within 20% of "
                  f"{plateau:.4f}, {sum(v > 0 for v in high)} positive")
        return ok, detail, {"low": low, "high": high, "plateau": plateau}
    return _timed(4, "figure 1 qualitative behaviour", 300, run)


def criterion_5(seed: int = 5, replicas: int = 100) -> CriterionResult:
    def run():
        init = InitialCondition.constant(1.0)
        drift = picard_solve(TANH, 0.5, init, 5.0, PicardConfig(M=200_000, K=160, tol=1e-4), seed=seed + 6)
        table = strong_error_curve(TANH, 0.5, init, 5.0, [25, 50, 100, 200, 400, 800], replicas, seed=seed,
                                   drift=drift)
        slope, _, r2 = fit_rate(table)
        ok = -0.65 <= slope <= -0.40 and r2 > 0.9
        means = ", ".join(f"{int(r[0])}:{r[1]:.4f}" for r in table.rows)
        return ok, f"slope {slope:.3f}, r2 {r2:.4f} (N:error {means})", {"slope": slope, "r2": r2,
                                                                          "rows": table.rows}
    return _timed(5, "strong convergence exponent", 1200, run)


def criterion_6(seed: int = 6) -> CriterionResult:
    def run():
        reports = {}
        for label, rf, h in (("exponential h=0.5", RateFunction.exponential(), 0.5), ("tanh h=2", TANH, 2.0)):
            p = ModelParams(N=50, h=h, rf=rf, T=1.0, seed=seed, initial=InitialCondition.iid_uniform(1.0),
                            record_events=False)
            reports[label] = check_jump_dominance(p, 500)
        ok = all(r.passed for r in reports.values())
        detail = "; ".join(f"{k}: deciles {'ok' if r.sf_passed else 'FAIL'}, mean/actor "
                           f"{r.mean_jumps_per_actor:.3f} <= {r.mean_bound:.3f}" for k, r in reports.items())
        return ok, detail, {"reports": reports}
    return _timed(6, "jump-count dominance", 60, run)


def criterion_7(seed: int = 7) -> CriterionResult:
    """Explicit run; the same checks are also live in every other experiment."""
    def run():
        worst_finite = 0.0
        for rf, h in ((TANH, 2.0), (RateFunction.exponential(), 0.5)):
            p = ModelParams(N=40, h=h, rf=rf, T=2.0, seed=seed, initial=InitialCondition.iid_uniform(1.0),
                            record_pressures=True, check_bounds="events")
            for tr in simulate_replicas(p, 20):
                rhs = p.L + h * tr.total_jumps / p.N
                worst_finite = max(worst_finite, float(np.max(np.max(np.abs(tr.pressures), axis=1) / rhs)))
        T, h, L = 2.0, 2.0, 1.0
        init = InitialCondition.iid_uniform(L)
        drift = picard_solve(TANH, h, init, T, PicardConfig(M=20_000, K=64), seed=seed)
        gamma = apriori_gamma(L, T, h, TANH)
        rng = stream(seed, "criterion-7")
        u0 = init.sample(10_000, rng)
        worst_limit = max(sample_limit_path(TANH, h, drift, float(u), T, rng, L=L).sup_abs() for u in u0) / gamma
        ok = worst_finite <= 1 + 1e-9 and worst_limit <= 1 + 1e-9
        return ok, (f"finite max |U|/(L+hZ/N) = {worst_finite:.3f}, limit max sup|U|/gamma_T = "
                    f"{worst_limit:.3f} over 10^4 paths"), {}
    return _timed(7, "pathwise a priori bounds", 120, run)


def criterion_8(seed: int = 8, replicas: int = 80) -> CriterionResult:
    def run():
        T, h, K = 5.0, 2.0, 100
        init = InitialCondition.constant(1.0)
        drift = picard_solve(TANH, h, init, T, PicardConfig(M=100_000, K=K, tol=1e-4), seed=seed)
        p = ModelParams(N=4000, h=h, rf=TANH, T=T, seed=seed, initial=init, grid_points=K + 1,
                        record_events=False, record_rates=True)
        runs = simulate_replicas(p, replicas)
        ap = np.array([r.a_plus for r in runs])
        am = np.array([r.a_minus for r in runs])
        se_fp = ap.std(axis=0, ddof=1) / math.sqrt(replicas)
        se_fm = am.std(axis=0, ddof=1) / math.sqrt(replicas)
        zp = np.abs(ap.mean(0) - drift.a_plus) / np.maximum(np.hypot(se_fp, drift.a_plus_se), 1e-12)
        zm = np.abs(am.mean(0) - drift.a_minus) / np.maximum(np.hypot(se_fm, drift.a_minus_se), 1e-12)
        worst = float(max(zp.max(), zm.max()))
        return worst < 4.0, f"max deviation {worst:.2f} combined standard errors over {K + 1} grid points", {
            "worst": worst}
    return _timed(8, "Picard-particle consistency", 600, run)


def criterion_9(seed: int = 9, replicas: int = 200) -> CriterionResult:
    def run():
        rf = RateFunction.exponential()
        init = InitialCondition.iid_uniform(1.0)
        T, h, N = 1.0, 0.5, 20
        drift = picard_solve(rf, h, init, T, PicardConfig(M=20_000, K=64), seed=seed)
        p = ModelParams(N=N, h=h, rf=rf, T=T, seed=seed, initial=init, record_events=False)
        self_err = max(float(coupled_run(p, drift, replica=r, reference="limit").errors.max()) for r in range(5))
        coupled = [coupled_run(p, drift, replica=r).finite_total_jumps for r in range(replicas)]
        alone = [tr.final_state.total_jumps for tr in
                 simulate_replicas(ModelParams(N=N, h=h, rf=rf, T=T, seed=seed + 1, initial=init,
                                               record_events=False, grid_points=2), replicas)]
        pval = stats.ks_2samp(coupled, alone).pvalue
        ok = self_err == 0.0 and pval > 0.01
        return ok, f"self-coupling error {self_err}, KS p-value of Z_T {pval:.3f}", {"pvalue": pval}
    return _timed(9, "coupling exactness", 120, run)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9]


def run_all(only=None, echo=print) -> list:
    out = []
    for i, fn in enumerate(CRITERIA, start=1):
        if only and i not in only:
            continue
        res = fn()
        if echo:
            echo(res.line())
        out.append(res)
    return out
