"""The mean-field limit equation.

A single actor in the limit resets to 0 when it expresses an opinion (rate
``phi(+U)`` for +1, ``phi(-U)`` for -1) and between resets drifts with speed
``h * (E[phi(U_t)] - E[phi(-U_t)])``.  The two expectations form the
:class:`DriftCurve`; the equation is solved for that curve by Monte Carlo
Picard iteration:

1. start from the curve of the frozen initial law;
2. simulate ``M`` paths driven by the current curve;
3. re-estimate the curve from the paths on the time grid;
4. repeat until the sup-norm change drops below ``tol``.

The paths reuse the same candidate points in every iteration (common random
numbers), so successive residuals decay geometrically instead of stalling at
the Monte Carlo noise level.  Both opinion measures are realised as one
candidate stream of height ``Lambda``: a candidate ``(s, z)`` is a ``+1`` if
``z <= phi(U)`` and a ``-1`` if ``phi(U) < z <= Phi(U)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._pool import pmap
from .errors import APrioriBoundError, DominatingRateError, PicardConvergenceError
from .finite_system import InitialCondition
from .io import read_csv, write_csv
from .rates import RateFunction
from .rng import stream

__all__ = [
    "DriftCurve",
    "PicardConfig",
    "LimitPath",
    "ContractionReport",
    "apriori_gamma",
    "picard_solve",
    "sample_limit_path",
    "contraction_report",
]


def apriori_gamma(L: float, t: float, h: float, rf: RateFunction) -> float:
    """A priori bound ``2L + 2 h t M^<(2h)`` on ``sup_{s<=t} |U_s|``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return 2.0 * L + 2.0 * h * t * rf.m_less(2.0 * h)


@dataclass
class DriftCurve:
    """Piecewise-linear estimates of ``E[phi(U_t)]`` (``a_plus``) and
    ``E[phi(-U_t)]`` (``a_minus``) on a time grid starting at 0."""

    grid: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    a_plus_se: Optional[np.ndarray] = None
    a_minus_se: Optional[np.ndarray] = None
    residuals: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    max_abs_pressure: float = math.nan

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.a_plus = np.asarray(self.a_plus, dtype=float)
        self.a_minus = np.asarray(self.a_minus, dtype=float)
        if not (self.grid.shape == self.a_plus.shape == self.a_minus.shape) or self.grid.ndim != 1:
            raise ValueError("grid, a_plus and a_minus must be 1-d arrays of equal length")
        if len(self.grid) < 2 or self.grid[0] != 0.0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must start at 0 and be strictly increasing")
        if np.any(self.a_plus < 0) or np.any(self.a_minus < 0):
            raise ValueError("drift curve rates must be non-negative")
        self._refresh()

    def _refresh(self):
        d = self.a_plus - self.a_minus
        self._d = d
        self._cum = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(self.grid))])

    @classmethod
    def constant(cls, a_plus: float, a_minus: float, T: float, points: int = 2) -> "DriftCurve":
        grid = np.linspace(0.0, T, points)
        return cls(grid, np.full(points, float(a_plus)), np.full(points, float(a_minus)))

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    def difference(self, t):
        """Interpolated ``a_plus - a_minus``."""
        return np.interp(t, self.grid, self._d)

    def integrated(self, t):
        """Exact ``int_0^t (a_plus - a_minus) ds`` of the interpolant (t clipped to [0, T])."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        k = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, len(self.grid) - 2)
        tau = t - self.grid[k]
        width = self.grid[k + 1] - self.grid[k]
        d0 = self._d[k]
        out = self._cum[k] + d0 * tau + (self._d[k + 1] - d0) * tau * tau / (2.0 * width)
        return float(out) if out.ndim == 0 else out

    def critical_times(self) -> np.ndarray:
        """Grid nodes plus zero crossings of the difference: the only places
        where the integrated curve can have an interior extremum."""
        d = self._d
        i = np.nonzero(d[:-1] * d[1:] < 0)[0]
        roots = self.grid[i] - d[i] * (self.grid[i + 1] - self.grid[i]) / (d[i + 1] - d[i])
        return np.union1d(self.grid, roots)

    def sup_distance(self, other: "DriftCurve") -> float:
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("curves live on different grids")
        return float(max(np.max(np.abs(self.a_plus - other.a_plus)),
                         np.max(np.abs(self.a_minus - other.a_minus))))

    def to_csv(self, path, comments=None) -> None:
        write_csv(path, ["t", "a_plus", "a_minus"], zip(self.grid, self.a_plus, self.a_minus), comments)

    @classmethod
    def from_csv(cls, path) -> "DriftCurve":
        cols, data = read_csv(path)
        if cols[:3] != ["t", "a_plus", "a_minus"]:
            raise ValueError(f"{path}: expected header t,a_plus,a_minus, got {','.join(cols)}")
        return cls(data[:, 0], data[:, 1], data[:, 2])


@dataclass
class PicardConfig:
    M: int = 20000
    K: Optional[int] = None          # grid intervals; default 512 per unit time
    tol: Optional[float] = None      # default 5 Monte Carlo standard errors
    max_iter: int = 50
    window: Optional[float] = None
    chunk: int = 8192
    workers: int = 1
    min_window_steps: int = 4

    def __post_init__(self):
        if self.M < 1000:
            raise ValueError("PicardConfig.M must be >= 1000")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("PicardConfig.tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("PicardConfig.max_iter must be >= 1")

    def intervals(self, T: float) -> int:
        return int(self.K) if self.K is not None else max(2, int(math.ceil(512 * T)))


@dataclass
class ContractionReport:
    t_star: float
    c_t_star: float
    lipschitz: float
    clamp_bound: float
    growth: float
    radius: float
    scale: float

    def c(self, t):
        """Contraction factor ``scale * t * exp(t * growth)``, ``scale = 2 h C_lip``."""
        t = np.asarray(t, dtype=float)
        return self.scale * t * np.exp(np.minimum(t * self.growth, 700.0))


def contraction_report(rf: RateFunction, h: float, L: float, T: float) -> ContractionReport:
    """Theoretical Picard contraction window for the truncated rate.

    With ``r = apriori_gamma(L, T)``, ``C_lip`` the Lipschitz constant of
    ``phi`` on ``[-r, r]`` and ``K`` its sup there, one Picard step contracts
    the sup-distance on ``[0, t]`` by ``c(t) = 2 h C_lip t exp(t C(T))`` with
    ``C(T) = 2 (L + 2 h K T) C_lip``.  Returns the largest ``t* <= T`` with
    ``c(t*) < 1`` (bisection), or ``T`` itself if ``c(T) < 1``.
    """
    r = apriori_gamma(L, T, h, rf)
    lip = rf.lipschitz_bound(r)
    K = rf.sup_phi(r)
    growth = 2.0 * (L + 2.0 * h * K * T) * lip
    scale = 2.0 * h * lip

    def c(t):
        return scale * t * math.exp(min(t * growth, 700.0))

    if c(T) < 1.0:
        t_star = T
    else:
        lo, hi = 0.0, T
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if c(mid) < 1.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * T:
                break
        t_star = lo
    return ContractionReport(t_star, c(t_star), lip, K, growth, r, scale)


@dataclass
class LimitPath:
    """One path of the limit process for a given drift curve.

    Between jumps ``U_t = base + h * drift.integrated(t)``; jumps reset to 0.
    """

    u0: float
    h: float
    drift: DriftCurve
    T: float
    jump_times: np.ndarray
    opinions: np.ndarray
    dominating_rate: float

    def _bases(self) -> np.ndarray:
        flow = self.h * self.drift.integrated(self.jump_times) if len(self.jump_times) else np.empty(0)
        return np.concatenate([[self.u0], -np.atleast_1d(flow)])

    def value(self, t):
        """Right-continuous value at ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        out = self._bases()[idx] + self.h * self.drift.integrated(t)
        return float(out) if out.ndim == 0 else out

    def sup_abs(self) -> float:
        """Exact ``sup_{s<=T} |U_s|``; the flow is piecewise quadratic, so the
        sup over each inter-jump segment is attained at its ends or at a
        critical time of the drift integral."""
        crit = self.drift.critical_times()
        pts = np.concatenate([[0.0, self.T], crit[crit <= self.T]])
        best = float(np.max(np.abs(self.value(pts))))
        if len(self.jump_times):
            left = self._bases()[:-1] + self.h * self.drift.integrated(self.jump_times)
            best = max(best, float(np.max(np.abs(left))))
        return best


def _candidates(source, rate: float, T: float):
    """Candidate points ``(s, z)`` on ``[0, T] x [0, rate]`` from a stream or generator."""
    if isinstance(source, np.random.Generator):
        n = source.poisson(rate * T)
        times = np.sort(source.uniform(0.0, T, n))
        return times, source.uniform(0.0, rate, n)
    return source.points(T)


def sample_limit_path(rf: RateFunction, h: float, drift: DriftCurve, u0: float, T: float,
                      source=None, L: Optional[float] = None) -> LimitPath:
    """Sample one path of the limit equation driven by ``drift`` by thinning.

    ``source`` is a :class:`numpy.random.Generator` (fresh randomness) or a
    stream object with ``dominating_rate`` and ``points(T)`` (shared
    randomness).  The dominating rate defaults to ``M^<`` of the smaller of
    ``apriori_gamma(max(|u0|, L), T)`` and ``max(L, S) + S`` with
    ``S = sup |h * drift.integrated|``, both valid bounds on sup|U|; a candidate where ``Phi(U)``
    exceeds it raises :class:`DominatingRateError`.
    """
    if drift.T < T - 1e-12:
        raise ValueError("drift curve does not cover [0, T]")
    L = abs(u0) if L is None else max(abs(u0), L)
    if source is None or isinstance(source, np.random.Generator):
        rate = rf.m_less(min(apriori_gamma(L, T, h, rf), _flow_bound(drift, h, L)))
        times, marks = _candidates(source if source is not None else np.random.default_rng(), rate, T)
    else:
        rate = float(source.dominating_rate)
        times, marks = _candidates(source, rate, T)
    phi = rf.scalar_phi()
    flows = h * np.atleast_1d(drift.integrated(times)) if len(times) else np.empty(0)
    base = float(u0)
    jumps, opinions = [], []
    for s, z, flow in zip(times.tolist(), marks.tolist(), flows.tolist()):
        u = base + flow
        up, down = phi(u), phi(-u)
        if up + down > rate:
            raise DominatingRateError(f"Phi(U)={up + down} exceeds dominating rate {rate} at t={s}")
        if z <= up + down:
            jumps.append(s)
            opinions.append(1 if z <= up else -1)
            base = -flow
    path = LimitPath(float(u0), h, drift, T, np.array(jumps), np.array(opinions, dtype=np.int64), rate)
    if rf.m_less(path.sup_abs()) > rate * (1 + 1e-12):
        raise DominatingRateError("path left the region where the dominating rate is valid")
    return path


# -- Monte Carlo Picard -------------------------------------------------------


@dataclass
class _Chunk:
    u0: np.ndarray
    times: np.ndarray      # (m, width + 1), sorted, inf padded
    marks: np.ndarray
    base: np.ndarray       # state at the current window start
    ptr: np.ndarray        # next unprocessed candidate


def _make_chunk(seed: int, index: int, u0: np.ndarray, rate: float, T: float) -> _Chunk:
    rng = stream(seed, "picard-candidates", index)
    m = len(u0)
    counts = rng.poisson(rate * T, size=m)
    width = int(counts.max()) + 1
    times = rng.uniform(0.0, T, size=(m, width))
    times[np.arange(width)[None, :] >= counts[:, None]] = np.inf
    times.sort(axis=1)
    marks = rng.uniform(0.0, rate, size=(m, width))
    return _Chunk(u0, times, marks, u0.copy(), np.zeros(m, dtype=np.int64))


def _chunk_pass(args):
    """Drive one chunk of paths through the window ``(t_lo, t_hi]`` of the grid.

    Returns sums (and sums of squares) of the truncated rates on the window
    grid points, the largest |U| met, and the end-of-window state.
    """
    rf, h, radius, chunk, gt, flow_grid, curve, t_hi = args
    m = len(chunk.base)
    base = chunk.base.copy()
    ptr = chunk.ptr.copy()
    nw = len(gt)
    diff = np.zeros((m, nw))
    max_abs = float(np.max(np.abs(base + (flow_grid[0] if nw else 0.0)))) if m else 0.0
    rows_all = np.arange(m)
    while True:
        s = chunk.times[rows_all, ptr]
        active = s <= t_hi
        if not active.any():
            break
        rows = rows_all[active]
        s = s[active]
        flow = h * curve.integrated(s)
        u = base[rows] + flow
        max_abs = max(max_abs, float(np.max(np.abs(u))))
        uc = np.clip(u, -radius, radius)
        total = rf.phi(uc) + rf.phi(-uc)
        jump = chunk.marks[rows, ptr[rows]] <= total
        jr = rows[jump]
        new_base = -flow[jump]
        j = np.searchsorted(gt, s[jump], side="left")
        inside = j < nw
        np.add.at(diff, (jr[inside], j[inside]), new_base[inside] - base[jr[inside]])
        base[jr] = new_base
        ptr[rows] += 1
    U = chunk.base[:, None] + np.cumsum(diff, axis=1) + flow_grid[None, :]
    if nw:
        max_abs = max(max_abs, float(np.max(np.abs(U))))
    Uc = np.clip(U, -radius, radius)
    up = np.asarray(rf.phi(Uc))
    down = np.asarray(rf.phi(-Uc))
    return (up.sum(axis=0), (up * up).sum(axis=0), down.sum(axis=0), (down * down).sum(axis=0),
            max_abs, base, ptr)


def picard_solve(rf: RateFunction, h: float, initial: InitialCondition, T: float,
                 cfg: Optional[PicardConfig] = None, seed: int = 0) -> DriftCurve:
    """Solve the limit equation on ``[0, T]`` for its drift curve.

    The rate is truncated outside ``[-r, r]``, ``r = apriori_gamma(L, T)``;
    the a priori bound keeps true paths inside, so this only guards Monte
    Carlo outliers.  Candidate jumps are drawn at a rate that covers
    ``Phi`` on the region the current curve can actually reach; whenever a
    new curve reaches further, the whole solve restarts with a higher rate
    (so unbounded ``phi`` such as the exponential stays tractable).  Windows: the solve proceeds over successive windows
    ``[w_k, w_{k+1}]``; inside a window Picard steps are repeated until the
    residual falls below ``tol``.  If the residual grows after the second
    step, or ``max_iter`` is reached, the window is halved and restarted.
    Raises :class:`PicardConvergenceError` (carrying all residual histories)
    when the window cannot shrink any further.
    """
    cfg = cfg or PicardConfig()
    if not h > 0 or not T > 0:
        raise ValueError("need h > 0 and T > 0")
    radius = apriori_gamma(initial.L, T, h, rf)
    rate = rf.m_less(min(radius, initial.L + h))
    ceiling = rf.m_less(radius)
    while True:
        try:
            return _picard_pass(rf, h, initial, T, cfg, seed, radius, rate)
        except _RateTooLow as exc:
            if rate >= ceiling:
                raise
            rate = min(ceiling, max(2.0 * rate, rf.m_less(min(radius, 1.25 * exc.needed))))


class _RateTooLow(Exception):
    def __init__(self, needed):
        super().__init__(f"candidate rate too low for |U| up to {needed}")
        self.needed = needed


def _flow_bound(curve: DriftCurve, h: float, L: float) -> float:
    """Bound on sup|U| for paths driven by ``curve`` from ``|U_0| <= L``."""
    S = float(np.max(np.abs(h * curve.integrated(curve.critical_times()))))
    return max(L, S) + S


def _picard_pass(rf, h, initial, T, cfg, seed, radius, rate) -> DriftCurve:
    L = initial.L
    K = cfg.intervals(T)
    grid = np.linspace(0.0, T, K + 1)
    step = T / K

    u0 = initial.sample(cfg.M, stream(seed, "picard-initial"))
    if np.any(np.abs(u0) > L):
        raise ValueError("initial law is not supported in [-L, L]")
    chunks = [_make_chunk(seed, i, u0[lo:lo + cfg.chunk], rate, T)
              for i, lo in enumerate(range(0, cfg.M, cfg.chunk))]

    u0c = np.clip(u0, -radius, radius)
    up0, down0 = np.asarray(rf.phi(u0c)), np.asarray(rf.phi(-u0c))
    a_plus = np.full(K + 1, up0.mean())
    a_minus = np.full(K + 1, down0.mean())
    se_plus = np.zeros(K + 1)
    se_minus = np.zeros(K + 1)
    se_plus[0] = up0.std() / math.sqrt(cfg.M)
    se_minus[0] = down0.std() / math.sqrt(cfg.M)

    if cfg.window is not None:
        window_steps = max(1, int(round(cfg.window / step)))
    else:
        t_star = contraction_report(rf, h, L, T).t_star
        window_steps = int(round(t_star / step)) if t_star >= T / 8 else K
    window_steps = max(1, min(window_steps, K))
    min_steps = min(cfg.min_window_steps, window_steps)

    histories, windows = [], []
    max_abs = float(np.max(np.abs(u0)))
    lo_idx = 0
    while lo_idx < K:
        hi_idx = min(K, lo_idx + window_steps)
        gt = grid[lo_idx + 1:hi_idx + 1]
        a_plus[lo_idx + 1:hi_idx + 1] = a_plus[lo_idx]
        a_minus[lo_idx + 1:hi_idx + 1] = a_minus[lo_idx]
        curve = DriftCurve(grid[:hi_idx + 1], a_plus[:hi_idx + 1], a_minus[:hi_idx + 1])
        flow_grid = h * curve.integrated(gt)
        history = []
        tol = cfg.tol
        outcome = None
        for _ in range(cfg.max_iter):
            if rf.m_less(min(radius, _flow_bound(curve, h, L))) > rate:
                raise _RateTooLow(_flow_bound(curve, h, L))
            results = pmap(_chunk_pass, [(rf, h, radius, c, gt, flow_grid, curve, grid[hi_idx]) for c in chunks],
                           cfg.workers)
            s_up = sum(r[0] for r in results)
            q_up = sum(r[1] for r in results)
            s_dn = sum(r[2] for r in results)
            q_dn = sum(r[3] for r in results)
            new_plus = s_up / cfg.M
            new_minus = s_dn / cfg.M
            var_plus = np.maximum(q_up / cfg.M - new_plus ** 2, 0.0)
            var_minus = np.maximum(q_dn / cfg.M - new_minus ** 2, 0.0)
            sl = slice(lo_idx + 1, hi_idx + 1)
            residual = float(max(np.max(np.abs(new_plus - a_plus[sl])), np.max(np.abs(new_minus - a_minus[sl]))))
            a_plus[sl] = new_plus
            a_minus[sl] = new_minus
            se_plus[sl] = np.sqrt(var_plus / cfg.M)
            se_minus[sl] = np.sqrt(var_minus / cfg.M)
            history.append(residual)
            window_max = max(r[4] for r in results)
            if tol is None:
                tol = 5.0 * float(max(se_plus[sl].max(), se_minus[sl].max(), 1e-15))
            if residual < tol:
                outcome = results
                break
            if len(history) >= 3 and residual > history[-2]:
                break
            curve = DriftCurve(grid[:hi_idx + 1], a_plus[:hi_idx + 1], a_minus[:hi_idx + 1])
            flow_grid = h * curve.integrated(gt)
        if outcome is None:
            histories.append({"window": (float(grid[lo_idx]), float(grid[hi_idx])), "residuals": history,
                              "converged": False})
            if hi_idx - lo_idx <= min_steps:
                raise PicardConvergenceError(
                    f"Picard iteration did not converge on [{grid[lo_idx]}, {grid[hi_idx]}]", histories)
            window_steps = max(min_steps, (hi_idx - lo_idx) // 2)
            continue
        max_abs = max(max_abs, window_max)
        if max_abs > radius * (1 + 1e-9):
            raise APrioriBoundError(f"limit path reached |U|={max_abs} > a priori bound {radius}")
        for c, r in zip(chunks, outcome):
            c.base, c.ptr = r[5], r[6]
        histories.append({"window": (float(grid[lo_idx]), float(grid[hi_idx])), "residuals": history,
                          "converged": True})
        windows.append((float(grid[lo_idx]), float(grid[hi_idx])))
        lo_idx = hi_idx

    out = DriftCurve(grid, a_plus, a_minus, se_plus, se_minus, residuals=histories, windows=windows,
                     max_abs_pressure=max_abs)
    return out
