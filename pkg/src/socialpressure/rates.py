"""Jump-rate families and the rate bounds derived from them.

A :class:`RateFunction` wraps ``phi``, the intensity at which an actor with
social pressure ``u`` expresses opinion ``o`` (the rate is ``phi(o * u)``).
Everything downstream (simulators, a priori bounds, invariant densities) only
talks to ``phi`` through this class.

Three families are supported:

* ``tanh_plus_one``: ``phi(r) = 1 + tanh(r)``;
* ``exponential``: ``phi(r) = exp(r)``;
* ``affine_odd``: ``phi(r) = f(r) + B`` for a user supplied odd ``f`` with
  derivative ``fprime``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np
from scipy import special

from .errors import RateOverflowError

__all__ = ["Family", "RateFunction", "EXP_LIMIT", "GRID_TOL"]

#: Largest |x| at which the exponential family may be evaluated.
EXP_LIMIT = 700.0
#: Successive grid estimates of sup/inf must agree to this before we stop refining.
GRID_TOL = 1e-9
# spot-check grid for the affine_odd hypotheses
_CHECK_GRID = np.linspace(-10.0, 10.0, 2001)


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


def _arctan01(x):
    return (2 / np.pi) * np.arctan(x)


def _darctan01(x):
    return (2 / np.pi) / (1 + x * x)


def _derf(x):
    return (2 / np.sqrt(np.pi)) * np.exp(-x * x)


def _scaled(g, amplitude, slope, x):
    return amplitude * g(slope * np.asarray(x, dtype=float))


# odd shapes with supremum 1, paired with their derivatives
_SHAPES = {"tanh": (np.tanh, _sech2), "arctan": (_arctan01, _darctan01), "erf": (special.erf, _derf)}


class Family(str, enum.Enum):
    TANH_PLUS_ONE = "tanh_plus_one"
    EXPONENTIAL = "exponential"
    AFFINE_ODD = "affine_odd"


def _refined(fn, a: float, b: float, reduce, n0: int = 65, max_doublings: int = 16) -> float:
    """Grid estimate of ``reduce(fn)`` on ``[a, b]``, doubled until stable to GRID_TOL."""
    if b <= a:
        return float(reduce(np.atleast_1d(fn(np.array([a], dtype=float)))))
    prev = None
    n = n0
    for _ in range(max_doublings):
        grid = np.linspace(a, b, n)
        if a < 0.0 < b:
            grid = np.union1d(grid, [0.0])
        value = float(reduce(fn(grid)))
        if prev is not None and abs(value - prev) < GRID_TOL:
            return value
        prev = value
        n = 2 * n - 1
    return value


@dataclass(frozen=True, eq=False)
class RateFunction:
    family: Family
    B: float = 1.0
    f: Optional[Callable] = field(default=None, repr=False)
    fprime: Optional[Callable] = field(default=None, repr=False)
    label: str = ""

    # -- construction ---------------------------------------------------------

    @classmethod
    def tanh_plus_one(cls) -> "RateFunction":
        return cls(Family.TANH_PLUS_ONE, 1.0, np.tanh, _sech2, "tanh_plus_one")

    @classmethod
    def exponential(cls) -> "RateFunction":
        return cls(Family.EXPONENTIAL, 0.0, None, None, "exponential")

    @classmethod
    def affine_odd(cls, f: Callable, fprime: Callable, B: float, label: str = "affine_odd",
                   check: bool = True) -> "RateFunction":
        """``phi = f + B`` with ``f`` odd, increasing, bounded by ``B`` and with
        ``fprime`` strictly decreasing on ``[0, inf)``.

        ``f`` and ``fprime`` must accept numpy arrays.  The hypotheses cannot be
        proved here; with ``check=True`` they are spot-checked on a uniform grid
        of 2001 points over ``[-10, 10]`` and a :class:`ValueError` is raised on
        the first one that fails.
        """
        rf = cls(Family.AFFINE_ODD, float(B), f, fprime, label)
        if check:
            rf._check_affine()
        return rf

    @classmethod
    def from_name(cls, name: str, **params) -> "RateFunction":
        """Build a family from its configuration name.

        ``affine_odd`` takes ``B`` and a ``shape`` in ``{"tanh", "arctan",
        "erf"}`` scaled as ``f(x) = amplitude * shape(slope * x)``, where every
        shape is normalised to have supremum 1.
        """
        if name == Family.TANH_PLUS_ONE.value:
            if params:
                raise ValueError(f"{name} takes no parameters, got {sorted(params)}")
            return cls.tanh_plus_one()
        if name == Family.EXPONENTIAL.value:
            if params:
                raise ValueError(f"{name} takes no parameters, got {sorted(params)}")
            return cls.exponential()
        if name == Family.AFFINE_ODD.value:
            params = dict(params)
            B = float(params.pop("B", 1.0))
            shape = params.pop("shape", "tanh")
            amplitude = float(params.pop("amplitude", B))
            slope = float(params.pop("slope", 1.0))
            if params:
                raise ValueError(f"unknown affine_odd parameters {sorted(params)}")
            if shape not in _SHAPES:
                raise ValueError(f"unknown affine_odd shape {shape!r}")
            g, dg = _SHAPES[shape]
            return cls.affine_odd(partial(_scaled, g, amplitude, slope),
                                  partial(_scaled, dg, amplitude * slope, slope),
                                  B, label=f"affine_odd[{shape},a={amplitude},k={slope},B={B}]")
        raise ValueError(f"unknown rate family {name!r}")

    def _check_affine(self) -> None:
        x = _CHECK_GRID
        fx = np.asarray(self.f(x), dtype=float)
        fpx = np.asarray(self.fprime(x), dtype=float)
        scale = max(1.0, float(np.max(np.abs(fx))))
        if not self.B > 0:
            raise ValueError("affine_odd needs B > 0")
        if abs(float(self.f(np.array([0.0]))[0])) > 1e-12:
            raise ValueError("affine_odd needs f(0) = 0")
        if np.max(np.abs(fx + fx[::-1])) > 1e-12 * scale:
            raise ValueError("affine_odd needs an odd f")
        if np.any(fpx <= 0):
            raise ValueError("affine_odd needs f' > 0")
        if np.any(fx > self.B + 1e-12 * scale):
            raise ValueError("affine_odd needs f <= B")
        pos = fpx[x >= 0]
        if np.any(np.diff(pos) > 1e-15) or not pos[-1] < pos[0]:
            raise ValueError("affine_odd needs f' strictly decreasing on [0, inf)")
        # derivative must match f; a wrong fprime silently breaks the Lipschitz bounds
        hstep = 1e-5
        fd = (np.asarray(self.f(x + hstep)) - np.asarray(self.f(x - hstep))) / (2 * hstep)
        if np.max(np.abs(fd - fpx)) > 1e-5 * max(1.0, float(np.max(np.abs(fpx)))):
            raise ValueError("fprime does not match the derivative of f")

    # -- evaluation -----------------------------------------------------------

    @property
    def name(self) -> str:
        return self.label or self.family.value

    def phi(self, x):
        """Jump rate ``phi(x)``; scalar in, float out; array in, array out."""
        arr = np.asarray(x, dtype=float)
        if self.family is Family.TANH_PLUS_ONE:
            out = 1.0 + np.tanh(arr)
        elif self.family is Family.EXPONENTIAL:
            if np.any(np.abs(arr) > EXP_LIMIT):
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            out = np.exp(arr)
        else:
            out = np.asarray(self.f(arr), dtype=float) + self.B
        return float(out) if out.ndim == 0 else out

    def scalar_phi(self) -> Callable[[float], float]:
        """A plain-float version of :meth:`phi` for tight event loops."""
        if self.family is Family.TANH_PLUS_ONE:
            tanh = math.tanh
            return lambda x: 1.0 + tanh(x)
        if self.family is Family.EXPONENTIAL:
            exp = math.exp

            def phi_exp(x):
                if abs(x) > EXP_LIMIT:
                    raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
                return exp(x)
            return phi_exp
        f, B = self.f, self.B
        return lambda x: float(f(np.float64(x))) + B

    def big_phi(self, r):
        """Total jump intensity ``phi(r) + phi(-r)`` at pressure ``r``."""
        r = np.asarray(r, dtype=float)
        out = np.asarray(self.phi(r)) + np.asarray(self.phi(-r))
        return float(out) if out.ndim == 0 else out

    def odd_part(self, x):
        """``(phi(x) - phi(-x)) / 2``; equals ``f`` for the affine families."""
        x = np.asarray(x, dtype=float)
        if self.family is Family.TANH_PLUS_ONE:
            out = np.tanh(x)
        elif self.family is Family.AFFINE_ODD:
            out = np.asarray(self.f(x), dtype=float)
        else:
            if np.any(np.abs(x) > EXP_LIMIT):
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            out = np.sinh(x)
        return float(out) if out.ndim == 0 else out

    def cumulative_big_phi(self, x):
        """``int_0^x Phi(s) ds`` in closed form."""
        x = np.asarray(x, dtype=float)
        if self.family is Family.EXPONENTIAL:
            if np.any(np.abs(x) > EXP_LIMIT):
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            out = 2.0 * np.sinh(x)
        elif self.family is Family.TANH_PLUS_ONE:
            out = 2.0 * x
        else:
            # the odd part cancels, Phi == 2B
            out = 2.0 * self.B * x
        return float(out) if out.ndim == 0 else out

    @property
    def is_affine(self) -> bool:
        return self.family in (Family.TANH_PLUS_ONE, Family.AFFINE_ODD)

    @property
    def threshold(self) -> Optional[float]:
        """Critical interaction ``B / f'(0)`` for the affine families, else None."""
        if self.family is Family.TANH_PLUS_ONE:
            return 1.0
        if self.family is Family.AFFINE_ODD:
            return self.B / float(self.fprime(np.array([0.0]))[0])
        return None

    # -- derived bounds -------------------------------------------------------

    def m_less(self, l: float) -> float:
        """``sup{Phi(r) : r in [0, l]}``."""
        if l < 0:
            raise ValueError("m_less needs l >= 0")
        if self.family is Family.TANH_PLUS_ONE:
            return 2.0
        if self.family is Family.EXPONENTIAL:
            if l > EXP_LIMIT:
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            return 2.0 * math.cosh(l)
        return _refined(self.big_phi, 0.0, float(l), np.max)

    def m_greater(self, l: float) -> float:
        """``inf{Phi(r) : r > l}``; finite even when Phi is bounded."""
        if l < 0:
            raise ValueError("m_greater needs l >= 0")
        if self.family is Family.TANH_PLUS_ONE:
            return 2.0
        if self.family is Family.EXPONENTIAL:
            # Phi = 2 cosh is increasing, the infimum sits at the open endpoint
            if l > EXP_LIMIT:
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            return 2.0 * math.cosh(l)
        prev = None
        span = 1.0
        for _ in range(12):
            value = _refined(self.big_phi, float(l), float(l) + span, np.min)
            if prev is not None and abs(value - prev) < GRID_TOL:
                return value
            prev = value
            span *= 2.0
        return value

    def m_greater_inverse(self, y: float) -> float:
        """Generalised inverse ``inf{r >= 0 : M^>(r) >= y}``.

        Returns ``math.inf`` when ``M^>`` never reaches ``y``.
        """
        if y < 0:
            raise ValueError("m_greater_inverse needs y >= 0")
        if y <= self.m_greater(0.0):
            return 0.0
        if self.family is Family.EXPONENTIAL:
            return float(np.arccosh(y / 2.0))
        if self.family is Family.TANH_PLUS_ONE:
            return math.inf
        hi = 1.0
        while self.m_greater(hi) < y:
            hi *= 2.0
            if hi > 1e3:
                return math.inf
        lo = 0.0
        while hi - lo > 1e-12 * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if self.m_greater(mid) >= y:
                hi = mid
            else:
                lo = mid
        return hi

    def lipschitz_bound(self, r: float) -> float:
        """A Lipschitz constant of ``phi`` on ``[-r, r]``."""
        if r < 0:
            raise ValueError("lipschitz_bound needs r >= 0")
        if self.family is Family.TANH_PLUS_ONE:
            return 1.0
        if self.family is Family.EXPONENTIAL:
            if r > EXP_LIMIT:
                raise RateOverflowError(f"exponential rate evaluated beyond |x| = {EXP_LIMIT}")
            return math.exp(r)
        return _refined(lambda x: np.asarray(self.fprime(x), dtype=float), -float(r), float(r), np.max)

    def sup_phi(self, r: float) -> float:
        """``sup{phi(x) : |x| <= r}`` (both families are non-decreasing)."""
        return self.phi(float(r))

    def describe(self) -> dict:
        out = {"family": self.family.value, "label": self.name}
        if self.family is Family.AFFINE_ODD:
            out["B"] = self.B
        return out
