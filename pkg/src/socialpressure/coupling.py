"""Coupled construction of the finite system and N limit copies.

Every (actor, opinion) pair owns one :class:`SharedPoissonStream`: candidate
points ``(s, z)`` on ``[0, T] x [0, Lambda]``.  Both processes read the same
candidates; each accepts one independently by its own indicator
``z <= phi(o * state)``.  A finite acceptance applies the opinion map, a limit
acceptance resets that copy to 0.  Actor ``a`` starts at the same pressure in
both processes.

Sup errors.  Write the finite pressure as ``offset(t) + local[a]`` and the
limit copy as ``h * I(t) + base[a]`` (``I`` the drift integral).  The error is
``g(t) + k_a`` with ``g = offset - h * I`` common to all actors and ``k_a``
constant between actor ``a``'s own acceptances.  ``g`` is piecewise quadratic
between candidates, so its range on any interval is read off the values at
candidate times (both sides of each jump) and drift critical times.  A
sparse table answers those range queries for every actor interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._pool import pmap
from .errors import APrioriBoundError, DominatingRateError
from .finite_system import InitialCondition, ModelParams, initial_pressures
from .io import write_csv
from .limit_sde import DriftCurve, PicardConfig, apriori_gamma, picard_solve
from .rates import RateFunction
from .rng import stream

__all__ = [
    "SharedPoissonStream",
    "CouplingResult",
    "ErrorTable",
    "dominating_rate",
    "coupled_run",
    "strong_error_curve",
    "fit_rate",
]

MAX_RAISES = 8
_BLOCK = 256


class SharedPoissonStream:
    """Replayable Poisson candidate stream of intensity ``ds x dz`` on
    ``[0, inf) x [0, Lambda]``, keyed by ``(seed, actor, opinion)``.

    :meth:`extend` raises ``Lambda``; the new band ``(Lambda, Lambda']`` is an
    independent stream keyed by its level, superposed on the old one, so
    points already seen are kept.
    """

    def __init__(self, seed: int, actor: int, opinion: int, rate: float):
        if not rate > 0:
            raise ValueError("dominating rate must be > 0")
        self.key = (int(seed), int(actor), int(opinion))
        self.cursor = 0
        self._bands = []
        self._merged = None
        self._add_band(0.0, float(rate))

    @property
    def dominating_rate(self) -> float:
        return self._bands[-1]["hi"]

    def _add_band(self, lo: float, hi: float) -> None:
        level = len(self._bands)
        rng = stream(self.key[0], "coupling", self.key[1], self.key[2], level)
        self._bands.append({"lo": lo, "hi": hi, "rng": rng, "t": np.empty(0), "z": np.empty(0), "end": 0.0})
        self._merged = None

    def extend(self, new_rate: float) -> None:
        if new_rate <= self.dominating_rate:
            raise ValueError("new rate must exceed the current one")
        self._add_band(self.dominating_rate, float(new_rate))

    def _fill(self, band: dict, horizon: float) -> None:
        width = band["hi"] - band["lo"]
        while band["end"] <= horizon:
            # fixed block size: the sequence must not depend on the horizons asked for
            n = _BLOCK
            gaps = band["rng"].exponential(1.0 / width, n)
            t = band["end"] + np.cumsum(gaps)
            z = band["lo"] + width * band["rng"].random(n)
            band["t"] = np.concatenate([band["t"], t])
            band["z"] = np.concatenate([band["z"], z])
            band["end"] = float(t[-1])
            self._merged = None

    def points(self, T: float):
        """All candidates with ``s <= T``, sorted by time."""
        for band in self._bands:
            self._fill(band, T)
        if self._merged is None:
            t = np.concatenate([b["t"] for b in self._bands])
            z = np.concatenate([b["z"] for b in self._bands])
            order = np.argsort(t, kind="stable")
            self._merged = (t[order], z[order])
        t, z = self._merged
        n = np.searchsorted(t, T, side="right")
        return t[:n].copy(), z[:n].copy()

    def next(self):
        """Replay the next candidate."""
        horizon = 1.0
        while True:
            t, z = self.points(horizon)
            if self.cursor < len(t):
                out = (float(t[self.cursor]), float(z[self.cursor]))
                self.cursor += 1
                return out
            horizon *= 2.0

    def reset(self) -> None:
        self.cursor = 0


@dataclass
class CouplingResult:
    errors: np.ndarray
    N: int
    seed: int
    replica: int
    finite_total_jumps: int
    limit_total_jumps: int
    dominating_rate: float
    initial_errors: np.ndarray
    raises: int = 0
    rate_levels: tuple = ()

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


def dominating_rate(params: ModelParams) -> float:
    """Conservative candidate height from the a priori bounds: ``M^<`` of the
    larger bound of the two processes, with the jump count capped at mean +
    6 sd of its dominating Poisson variable.  Astronomically large for fast
    growing rates; :func:`coupled_run` starts lower and raises on demand."""
    rf, h, N, T, L = params.rf, params.h, params.N, params.T, params.L
    lam = T * N * rf.m_less(2.0 * h)
    z_cap = N + 2.0 * (lam + 6.0 * math.sqrt(lam))
    return rf.m_less(max(apriori_gamma(L, T, h, rf), L + h * z_cap / N))


def _limit_radius(drift: DriftCurve, h: float, L: float, T: float) -> float:
    """Bound on every limit copy: ``|base| + sup |h I|`` with ``|base| <= max(L, sup |h I|)``."""
    crit = drift.critical_times()
    crit = np.union1d(crit[crit <= T], [0.0, T])
    s = float(np.max(np.abs(h * np.asarray(drift.integrated(crit)))))
    return max(L, s) + s


def _covered_radius(rf: RateFunction, rate: float) -> float:
    """Largest ``r`` (up to bisection accuracy) with ``M^<(r) <= rate``."""

    def ok(r):
        try:
            return rf.m_less(r) <= rate
        except (OverflowError, ArithmeticError):
            return False

    if not ok(0.0):
        return -1.0
    hi = 1.0
    while ok(hi):
        hi *= 2.0
        if hi > 1e3:
            return math.inf
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


class _Breach(Exception):
    pass


def _sparse_tables(g: np.ndarray):
    hi = [g]
    lo = [g]
    span = 1
    while 2 * span <= len(g):
        hi.append(np.maximum(hi[-1][:-span], hi[-1][span:]))
        lo.append(np.minimum(lo[-1][:-span], lo[-1][span:]))
        span *= 2
    return hi, lo


def _range(tables, a: np.ndarray, b: np.ndarray, reduce):
    length = b - a + 1
    level = np.floor(np.log2(length)).astype(np.int64)
    out = np.empty(len(a))
    for lv in np.unique(level):
        m = level == lv
        tab = tables[lv]
        out[m] = reduce(tab[a[m]], tab[b[m] - (1 << lv) + 1])
    return out


def _run_once(params: ModelParams, drift: DriftCurve, u0: np.ndarray, streams, rate: float, finite: bool,
              lim_radius: float):
    rf, h, N, T, L = params.rf, params.h, params.N, params.T, params.L
    ts, zs, actors, opinions = [], [], [], []
    for (a, o), st in streams.items():
        t, z = st.points(T)
        ts.append(t)
        zs.append(z)
        actors.append(np.full(len(t), a, dtype=np.int64))
        opinions.append(np.full(len(t), o, dtype=np.int64))
    S = np.concatenate(ts)
    order = np.argsort(S, kind="stable")
    S = S[order]
    Z = np.concatenate(zs)[order]
    A = np.concatenate(actors)[order]
    O = np.concatenate(opinions)[order]
    HI = h * np.atleast_1d(drift.integrated(S)) if len(S) else np.empty(0)
    n = len(S)

    phi = rf.scalar_phi()
    gamma = apriori_gamma(L, T, h, rf)
    jump = h / N
    off = 0.0
    loc = [float(x) for x in u0]      # finite: U = off + loc[a]
    base = [float(x) for x in u0]     # limit:  V = h I(t) + base[a]
    covered = _covered_radius(rf, rate)
    if lim_radius > covered:
        raise _Breach(lim_radius)
    # every finite pressure is off + loc[a], so |U| <= loc_abs + |off|
    loc_abs = float(np.max(np.abs(u0))) if finite else lim_radius
    if loc_abs > covered:
        raise _Breach(loc_abs)
    off_post = np.empty(n)
    changes = []                      # (candidate index, actor, k after it)
    z_fin = 0
    z_lim = 0
    S_l, Z_l, A_l, O_l, HI_l = S.tolist(), Z.tolist(), A.tolist(), O.tolist(), HI.tolist()
    for i in range(n):
        a = A_l[i]
        o = O_l[i]
        z = Z_l[i]
        hi = HI_l[i]
        v = base[a] + hi
        pb = phi(o * v)
        if finite:
            u = off + loc[a]
            if abs(u) > (L + h * z_fin / N) * (1 + 1e-9) + 1e-12:
                raise APrioriBoundError(f"finite pressure {u} breaks the pathwise bound at t={S_l[i]}")
            pa = phi(o * u)
        else:
            u = loc[a] + hi
            pa = phi(o * u)
        if abs(v) > gamma * (1 + 1e-9):
            raise APrioriBoundError(f"limit pressure {v} exceeds the a priori bound {gamma}")
        acc_a = z <= pa
        acc_b = z <= pb
        if acc_a:
            z_fin += 1
            if finite:
                off += o * jump
                loc[a] = -off
                if abs(off) > loc_abs:
                    loc_abs = abs(off)
                if loc_abs + abs(off) > covered:
                    raise _Breach(loc_abs + abs(off))
            else:
                loc[a] = -hi
        if acc_b:
            z_lim += 1
            base[a] = -hi
        off_post[i] = off
        if acc_a or acc_b:
            changes.append((i, a, loc[a] - base[a]))

    # evaluation points: before / after every candidate plus drift critical times
    crit = drift.critical_times()
    crit = np.union1d(crit[crit <= T], [0.0, T])
    times = np.concatenate([S, S, crit])
    kind = np.concatenate([np.zeros(n, np.int64), np.full(n, 2, np.int64), np.ones(len(crit), np.int64)])
    idx = np.concatenate([np.arange(n), np.arange(n), np.arange(len(crit))])
    ordr = np.lexsort((kind, times))
    pos = np.empty(len(times), dtype=np.int64)
    pos[ordr] = np.arange(len(times))
    pos_pre, pos_post = pos[:n], pos[n:2 * n]

    if finite:
        off_pre = np.concatenate([[0.0], off_post[:-1]]) if n else np.empty(0)
        last = np.searchsorted(S, crit, side="right") - 1
        off_crit = np.where(last >= 0, off_post[np.maximum(last, 0)] if n else 0.0, 0.0)
        offs = np.concatenate([off_pre, off_post, off_crit])
        g = offs - h * np.asarray(drift.integrated(times))
    else:
        g = np.zeros(len(times))
    g = g[ordr]
    hi_tab, lo_tab = _sparse_tables(g)

    ch = np.array([c[0] for c in changes], dtype=np.int64)
    ca = np.array([c[1] for c in changes], dtype=np.int64)
    ck = np.array([c[2] for c in changes], dtype=float)
    if len(ch):
        o2 = np.lexsort((ch, ca))
        ch, ca, ck = ch[o2], ca[o2], ck[o2]
    # interval starts: t=0 for each actor (k=0) and after each change
    first = np.ones(len(ch), dtype=bool)
    if len(ch):
        first[1:] = ca[1:] != ca[:-1]
    start_actor = np.concatenate([np.arange(N), ca])
    start_pos = np.concatenate([np.zeros(N, np.int64), pos_post[ch]])
    start_k = np.concatenate([np.zeros(N), ck])
    # interval ends: next change of the same actor, else the last point
    end_pos = np.full(N + len(ch), len(times) - 1, dtype=np.int64)
    # actor's first change closes its t=0 interval
    end_pos[ca[first]] = pos_pre[ch[first]]
    if len(ch):
        nxt = np.nonzero(~first)[0]
        end_pos[N + nxt - 1] = pos_pre[ch[nxt]]
    gmax = _range(hi_tab, start_pos, end_pos, np.maximum)
    gmin = _range(lo_tab, start_pos, end_pos, np.minimum)
    err = np.maximum(gmax + start_k, -(gmin + start_k))
    errors = np.zeros(N)
    np.maximum.at(errors, start_actor, err)
    errors += 0.0
    initial = np.abs(g[0] + np.array([loc0 - b0 for loc0, b0 in zip(u0, u0)]))
    return errors, z_fin, z_lim, initial


def coupled_run(params: ModelParams, drift: DriftCurve, replica: int = 0, reference: str = "finite") -> CouplingResult:
    """Run the finite system and N limit copies on shared randomness.

    ``reference="limit"`` replaces the finite system by a second set of limit
    copies (self-coupling); all errors are then exactly 0.
    """
    if reference not in ("finite", "limit"):
        raise ValueError("reference must be 'finite' or 'limit'")
    if drift.T < params.T - 1e-12:
        raise ValueError("drift curve does not cover [0, T]")
    N = params.N
    seed = int(params.seed)
    u0 = initial_pressures(params, replica)
    lim_radius = _limit_radius(drift, params.h, params.L, params.T)
    rf = params.rf
    rate = rf.m_less(max(lim_radius, params.L + params.h))
    streams = {(a, o): SharedPoissonStream(seed * 1_000_003 + replica, a, o, rate)
               for a in range(N) for o in (1, -1)}
    raises = 0
    levels = [rate]
    while True:
        try:
            errors, zf, zl, init = _run_once(params, drift, u0, streams, rate, reference == "finite", lim_radius)
            break
        except _Breach as exc:
            if raises >= MAX_RAISES:
                raise DominatingRateError(f"pressure radius {exc.args[0]} still not covered by rate {rate} "
                                          f"after {raises} raises")
            raises += 1
            rate = max(2.0 * rate, rf.m_less(exc.args[0] + params.h))
            levels.append(rate)
            for st in streams.values():
                st.extend(rate)
    return CouplingResult(errors, N, seed, replica, zf, zl, rate, init, raises, tuple(levels))


@dataclass
class ErrorTable:
    rows: list = field(default_factory=list)   # (N, mean, se, replicas)

    def to_csv(self, path, comments=None) -> None:
        write_csv(path, ["N", "mean_sup_error", "std_error", "replicas"], self.rows, comments)

    @property
    def Ns(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=float)

    @property
    def means(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows], dtype=float)


class _Replica:
    def __init__(self, params, drift):
        self.params, self.drift = params, drift

    def __call__(self, r):
        return coupled_run(self.params, self.drift, replica=r).mean_error


def strong_error_curve(rf: RateFunction, h: float, initial: InitialCondition, T: float, Ns: Sequence[int],
                       replicas: int, seed: int = 0, drift: Optional[DriftCurve] = None,
                       picard: Optional[PicardConfig] = None, workers: int = 1) -> ErrorTable:
    """Mean sup-error per N, each averaged over ``replicas`` coupled runs.

    The drift curve is solved once and reused for every N.
    """
    if len(Ns) < 2 or min(Ns) < 10:
        raise ValueError("need at least two actor counts, each >= 10")
    if drift is None:
        drift = picard_solve(rf, h, initial, T, picard or PicardConfig(), seed=seed)
    table = ErrorTable()
    for N in Ns:
        params = ModelParams(N=int(N), h=h, rf=rf, T=T, seed=seed * 7919 + int(N), initial=initial,
                             record_events=False)
        errs = np.array(pmap(_Replica(params, drift), list(range(replicas)), workers))
        table.rows.append((int(N), float(errs.mean()), float(errs.std(ddof=1) / math.sqrt(replicas)), replicas))
    return table


def fit_rate(table) -> tuple:
    """Least squares of log mean-error on log N: ``(slope, intercept, r2)``."""
    rows = table.rows if isinstance(table, ErrorTable) else list(table)
    if len(rows) < 2:
        raise ValueError("fit_rate needs at least two rows")
    N = np.array([r[0] for r in rows], dtype=float)
    e = np.array([r[1] for r in rows], dtype=float)
    if np.any(e <= 0) or np.any(N <= 0):
        raise ValueError("fit_rate needs positive errors and actor counts (log undefined)")
    x, y = np.log(N), np.log(e)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    # a flat exact line has ss at rounding level; call that a perfect fit
    flat = ss <= 1e-24 * len(y) * max(1.0, float(np.max(y ** 2)))
    r2 = 1.0 if flat else 1.0 - float(np.sum(resid ** 2)) / ss
    return float(slope), float(intercept), r2
