"""Invariant measures of the limit equation.

For a drift level ``gamma != 0`` the limit process behaves like a house of
cards: it climbs linearly with slope ``h * gamma`` and falls back to 0 at
rate ``Phi``.  Its invariant density is

    g(x) = exp(-I(x) / (gamma h)) / Z,   I(x) = int_0^x Phi,

on the half line on the side of ``gamma``.  A level is self-consistent when
``gamma = int (phi(x) - phi(-x)) g(x) dx``; ``gamma = 0`` (the point mass at
0) always is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import GammaScanError, QuadratureError, RateOverflowError
from .io import write_csv
from .rates import RateFunction
from .rng import stream

__all__ = [
    "InvariantDensity",
    "GammaSolution",
    "density",
    "gamma_residual",
    "solve_gamma",
    "phase_diagram",
    "HouseOfCardsPath",
    "simulate_house_of_cards",
    "check_recurrence_time",
]

QUAD_TOL = 1e-12
MAX_PANELS = 80


def _tail_quad(fn, scale: float, tol: float) -> float:
    """``int_0^inf fn`` over doubling panels; stops once a panel adds less
    than ``tol / 10``."""
    total = 0.0
    a, w = 0.0, scale
    for k in range(MAX_PANELS):
        val, err = integrate.quad(fn, a, a + w, epsabs=tol / 100, epsrel=1e-13, limit=200)
        if not math.isfinite(val) or err > tol + 1e-11 * abs(val):
            raise QuadratureError(f"quadrature on [{a}, {a + w}] reached error {err} > {tol}")
        total += val
        if k >= 2 and abs(val) < tol / 10:
            return total
        a += w
        w *= 2.0
    raise QuadratureError(f"tail integral not converged after {MAX_PANELS} panels (last end {a}); "
                          "the integrability assumption looks violated")


def _scale(rf: RateFunction, c: float, x0: float = 0.0) -> float:
    """First panel width: about where ``I`` has grown by ``c`` past ``x0``."""
    s = c / max(float(rf.big_phi(x0)), 1e-300)
    i0 = float(rf.cumulative_big_phi(x0))
    while s > 1e-12 * c:
        try:
            if float(rf.cumulative_big_phi(x0 + s)) - i0 <= 4.0 * c:
                break
        except RateOverflowError:
            pass
        s /= 2.0
    return s


class InvariantDensity:
    """Normalised invariant density for a nonzero drift level ``gamma``."""

    def __init__(self, rf: RateFunction, h: float, gamma: float, quad_tol: float = QUAD_TOL):
        if gamma == 0 or not math.isfinite(gamma):
            raise ValueError("gamma must be a nonzero real; gamma = 0 is the point mass at 0")
        if not h > 0:
            raise ValueError("h must be > 0")
        self.rf, self.h, self.gamma, self.quad_tol = rf, h, float(gamma), quad_tol
        self.support_sign = 1 if gamma > 0 else -1
        self._c = abs(self.gamma) * h
        self.norm_const = _tail_quad(self._kernel, _scale(rf, self._c), quad_tol)

    def _kernel(self, x):
        try:
            return math.exp(-float(self.rf.cumulative_big_phi(x)) / self._c)
        except RateOverflowError:
            return 0.0     # far tail of a fast-growing rate

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        y = self.support_sign * x
        inside = y >= 0
        out = np.zeros_like(y)
        if np.any(inside):
            out[inside] = np.exp(-np.asarray(self.rf.cumulative_big_phi(y[inside])) / self._c) / self.norm_const
        return float(out) if out.ndim == 0 else out

    def integral(self, fn) -> float:
        """``int fn(x) g(x) dx`` over the support."""
        s = self.support_sign

        def integrand(y):
            k = self._kernel(y)
            return fn(s * y) * k if k > 0.0 else 0.0

        return _tail_quad(integrand, _scale(self.rf, self._c), self.quad_tol) / self.norm_const

    def total_mass(self) -> float:
        return self.integral(lambda x: 1.0)

    def mean(self) -> float:
        return self.integral(lambda x: x)

    def cdf(self, x):
        """Distribution function."""
        def one(v):
            y = self.support_sign * v
            if y <= 0:
                return 0.0 if self.support_sign > 0 else 1.0
            val, _ = integrate.quad(self._kernel, 0.0, y, epsabs=self.quad_tol / 100, epsrel=1e-13, limit=200)
            p = val / self.norm_const
            return min(p, 1.0) if self.support_sign > 0 else max(1.0 - p, 0.0)

        x = np.asarray(x, dtype=float)
        out = np.vectorize(one, otypes=[float])(x)
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path, xs, comments=None) -> None:
        xs = np.asarray(xs, dtype=float)
        write_csv(path, ["x", "g(x)"], zip(xs, np.atleast_1d(self(xs))), comments)


def density(rf: RateFunction, h: float, gamma: float, x):
    return InvariantDensity(rf, h, gamma)(x)


def _reduced_residual(rf: RateFunction, h: float, gamma: float) -> float:
    # gamma > 0.  2 int e^-u f(c u) du - gamma with c = h gamma / 2B, written
    # with the linear part of f pulled out so the sign is clean for small gamma.
    B = rf.B
    c = h * gamma / (2.0 * B)
    f, d0 = rf.f, float(rf.fprime(0.0))

    def integrand(u):
        return math.exp(-u) * (float(f(c * u)) - c * u * d0)

    val, err = integrate.quad(integrand, 0.0, 60.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    if err > 1e-11:
        raise QuadratureError(f"reduced residual quadrature error {err}")
    return 2.0 * val + gamma * (h * d0 / B - 1.0)


def gamma_residual(rf: RateFunction, h: float, gamma: float, form: str = "auto",
                   quad_tol: float = QUAD_TOL) -> float:
    """``int (phi(x) - phi(-x)) g_gamma(dx) - gamma``; odd in ``gamma``, 0 at 0.

    ``form``: ``"general"`` integrates against the density, ``"reduced"``
    uses the single exponential integral available for the affine-odd
    families, ``"auto"`` picks the reduced form when it applies.
    """
    if gamma == 0:
        return 0.0
    if form not in ("auto", "general", "reduced"):
        raise ValueError("form must be 'auto', 'general' or 'reduced'")
    sign = 1.0 if gamma > 0 else -1.0
    g = abs(gamma)
    if form == "reduced" or (form == "auto" and rf.is_affine):
        if not rf.is_affine:
            raise ValueError("the reduced form needs an affine-odd rate function")
        return sign * _reduced_residual(rf, h, g)
    dens = InvariantDensity(rf, h, g, quad_tol)
    return sign * (dens.integral(lambda x: 2.0 * float(rf.odd_part(x))) - g)


@dataclass(frozen=True)
class GammaSolution:
    roots: tuple
    threshold: Optional[float]
    residual_tol: float
    unique: bool

    @property
    def positive(self) -> list:
        return [r for r in self.roots if r > 0]

    @property
    def gamma_star(self) -> float:
        """Largest root (0 when only the point mass exists)."""
        return max(self.roots)


def solve_gamma(rf: RateFunction, h: float, residual_tol: float = 1e-10, gamma_max: Optional[float] = None,
                points: int = 240, max_doublings: int = 12) -> GammaSolution:
    """Self-consistent drift levels.

    0 is always a root.  Positive roots are bracketed by sign changes of the
    residual on a geometric grid ``[1e-6, gamma_max]`` and refined by
    Brent's method; their negatives are roots too.  If the residual is still
    positive and increasing at ``gamma_max`` the range is doubled.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    if gamma_max is None:
        gamma_max = 2.0 * rf.m_less(min(10.0 * h, 50.0))
    for _ in range(max_doublings + 1):
        grid = np.geomspace(1e-6, gamma_max, points)
        res = np.array([gamma_residual(rf, h, g) for g in grid])
        if not (res[-1] > 0 and res[-1] >= res[-2]):
            break
        gamma_max *= 2.0
    else:
        raise GammaScanError(f"residual still growing at gamma_max={gamma_max}; use a larger scan range")

    roots = [0.0]
    for i in np.nonzero(np.sign(res[:-1]) * np.sign(res[1:]) < 0)[0]:
        r = optimize.brentq(lambda g: gamma_residual(rf, h, g), grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15,
                            maxiter=200)
        val = gamma_residual(rf, h, r)
        if abs(val) >= residual_tol:
            raise GammaScanError(f"root near {r} only reaches residual {val}")
        roots += [r, -r]
    for i in np.nonzero(res == 0)[0]:
        roots += [float(grid[i]), -float(grid[i])]
    return GammaSolution(tuple(sorted(set(roots))), rf.threshold, residual_tol, rf.is_affine)


def phase_diagram(rf: RateFunction, h_grid: Sequence[float], residual_tol: float = 1e-10) -> list:
    """Rows ``(h, gamma*, invariant mean)``; zeros below the transition."""
    rows = []
    for h in h_grid:
        if not h > 0:
            raise ValueError("h values must be > 0")
        sol = solve_gamma(rf, h, residual_tol)
        g = sol.gamma_star
        mean = InvariantDensity(rf, h, g).mean() if g > 0 else 0.0
        rows.append((float(h), g, mean))
    return rows


def write_phase_diagram(path, rows, comments=None) -> None:
    write_csv(path, ["h", "gamma_star", "invariant_mean"], rows, comments)


@dataclass
class HouseOfCardsPath:
    """Sawtooth path: slope ``h * gamma`` between falls to 0."""

    y0: float
    slope: float
    T: float
    jump_times: np.ndarray

    def value(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.jump_times, t, side="right")
        last = np.concatenate([[0.0], self.jump_times])[k]
        start = np.where(k == 0, self.y0, 0.0)
        out = start + self.slope * (t - last)
        return float(out) if out.ndim == 0 else out

    def occupation(self, a: float, b: float, t0: float = 0.0, t1: Optional[float] = None) -> float:
        """Time spent in ``[a, b]`` during ``[t0, t1]``."""
        t1 = self.T if t1 is None else t1
        edges = np.concatenate([[0.0], self.jump_times, [self.T]])
        lo = np.clip(edges[:-1], t0, t1)
        hi = np.clip(edges[1:], t0, t1)
        starts = np.concatenate([[self.y0], np.zeros(len(self.jump_times))])
        y_lo = starts + self.slope * (lo - edges[:-1])
        d = hi - lo
        m = self.slope
        if m == 0:
            return float(np.sum(d * ((y_lo >= a) & (y_lo <= b))))
        ta = (a - y_lo) / m
        tb = (b - y_lo) / m
        enter, leave = np.minimum(ta, tb), np.maximum(ta, tb)
        return float(np.sum(np.clip(np.minimum(leave, d) - np.maximum(enter, 0.0), 0.0, None)))


def simulate_house_of_cards(rf: RateFunction, h: float, gamma: float, y0: float, T: float,
                            seed: int = 0) -> HouseOfCardsPath:
    """Exact simulation by thinning against ``M^<`` on short linear segments."""
    if not T > 0:
        raise ValueError("T must be > 0")
    rng = stream(seed, "house-of-cards")
    slope = h * gamma
    seg = min(1.0, 1.0 / abs(slope)) if slope != 0 else 1.0
    const = 2.0 * rf.B if rf.is_affine else None
    big_phi = rf.big_phi
    t, y = 0.0, float(y0)
    jumps = []
    exps = rng.standard_exponential(4096)
    unis = rng.random(4096)
    ke = ku = 0
    while t < T:
        end = min(T, t + seg)
        bound = const if const is not None else rf.m_less(max(abs(y), abs(y + slope * (end - t))))
        while True:
            if ke == len(exps):
                exps, ke = rng.standard_exponential(4096), 0
            s = t + exps[ke] / bound
            ke += 1
            if s > end:
                y += slope * (end - t)
                t = end
                break
            y += slope * (s - t)
            t = s
            if ku == len(unis):
                unis, ku = rng.random(4096), 0
            u = unis[ku]
            ku += 1
            if const is not None or u * bound <= float(big_phi(y)):
                jumps.append(t)
                y = 0.0
                break
    return HouseOfCardsPath(float(y0), slope, T, np.array(jumps))


def check_recurrence_time(rf: RateFunction, h: float, gamma: float, x: float, quad_tol: float = QUAD_TOL) -> float:
    """Mean time to fall back to 0 when started at ``x``:
    ``(1 / (h gamma)) int_0^inf exp(-(I(x + w) - I(x)) / (h gamma)) dw``."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    c = h * gamma
    ix = float(rf.cumulative_big_phi(x))

    def kernel(w):
        try:
            return math.exp(-(float(rf.cumulative_big_phi(x + w)) - ix) / c)
        except RateOverflowError:
            return 0.0

    return _tail_quad(kernel, _scale(rf, c, x), quad_tol) / c
