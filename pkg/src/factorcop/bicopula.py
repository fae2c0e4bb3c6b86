r"""Bivariate elliptical linking copulas (Gaussian and Student-t).

Two layers are exposed:

* u-scale functions (:func:`bicop_pdf`, :func:`hfun`, :func:`hinv`, ...) taking
  arguments in the unit square;
* :class:`GaussianKernel` / :class:`StudentTKernel`, which work on the
  quantile ("score") scale. The likelihood code maps uniforms to scores once
  and then stays on that scale, which avoids repeated quantile evaluations
  and keeps precision in the tails.

For the Student-t copula the conditional distribution is

.. math::
    C_{1|2}(u_1|u_2) = T_{\nu+1}\left(\frac{x_1 - \rho x_2}
        {\sqrt{(\nu + x_2^2)(1-\rho^2)/(\nu+1)}}\right),
    \quad x_k = T_\nu^{-1}(u_k).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np
from scipy import interpolate, special

from .errors import DomainError

EPS = 1e-12


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"


@dataclass(frozen=True)
class BicopParam:
    family: Family
    rho: float
    nu: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.family is Family.STUDENT_T:
            if self.nu is None or self.nu < 2:
                raise DomainError(f"student_t copula needs nu >= 2, got {self.nu}")

    @property
    def kernel(self) -> "GaussianKernel | StudentTKernel":
        return kernel(self.family, self.nu)


class GaussianKernel:
    family = Family.GAUSSIAN
    nu = None

    def ppf(self, u):
        return special.ndtri(u)

    def cdf(self, x):
        return special.ndtr(x)

    def from_normal_scores(self, z):
        return np.asarray(z, dtype=float)

    def log_pdf(self, x1, x2, rho):
        """log copula density at scores (x1, x2)."""
        s2 = 1.0 - rho * rho
        return -0.5 * np.log(s2) - (rho * rho * (x1 * x1 + x2 * x2) - 2.0 * rho * x1 * x2) / (2.0 * s2)

    def cond_arg(self, x1, x2, rho):
        return (x1 - rho * x2) / np.sqrt(1.0 - rho * rho)

    def cond_cdf(self, a):
        return special.ndtr(a)

    def cond_to_scores(self, a):
        """Score of C_{1|2}(u1|u2) given its conditional argument."""
        return a

    def cond_log_diff(self, a_hi, a_lo):
        """log(C(a_hi) - C(a_lo)) for the conditional cdf, a_lo <= a_hi."""
        return log_ndtr_diff(a_lo, a_hi)

    def inv_cond_arg(self, a, x2, rho):
        return a * np.sqrt(1.0 - rho * rho) + rho * x2

    def cond_ppf(self, w):
        return special.ndtri(w)


class StudentTKernel:
    family = Family.STUDENT_T

    def __init__(self, nu: float):
        self.nu = float(nu)
        nu = self.nu
        self._c1 = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * np.log(nu * np.pi)
        self._c2 = special.gammaln((nu + 2) / 2) - special.gammaln(nu / 2) - np.log(nu * np.pi)

    def ppf(self, u):
        return t_ppf(self.nu, u)

    def cdf(self, x):
        return special.stdtr(self.nu, x)

    def from_normal_scores(self, z):
        z = np.asarray(z, dtype=float)
        # T^{-1}(Phi(z)) through the lower tail on both sides
        return np.sign(z) * -t_ppf(self.nu, special.ndtr(-np.abs(z)))

    def _log_t1(self, x):
        return self._c1 - (self.nu + 1) / 2 * np.log1p(x * x / self.nu)

    def log_pdf(self, x1, x2, rho):
        nu = self.nu
        s2 = 1.0 - rho * rho
        q = (x1 * x1 - 2.0 * rho * x1 * x2 + x2 * x2) / (nu * s2)
        log_t2 = self._c2 - 0.5 * np.log(s2) - (nu + 2) / 2 * np.log1p(q)
        return log_t2 - self._log_t1(x1) - self._log_t1(x2)

    def cond_arg(self, x1, x2, rho):
        nu = self.nu
        return (x1 - rho * x2) / np.sqrt((nu + x2 * x2) * (1.0 - rho * rho) / (nu + 1))

    def cond_cdf(self, a):
        return special.stdtr(self.nu + 1, a)

    def cond_to_scores_exact(self, a):
        a = np.asarray(a, dtype=float)
        lower = special.stdtr(self.nu + 1, -np.abs(a))
        return np.sign(a) * -t_ppf(self.nu, lower)

    _SPLINE_LIMIT = 1e8

    @cached_property
    def _score_spline(self):
        # T_nu^{-1}(T_{nu+1}(a)) tabulated on the asinh scale (relative error ~1e-10)
        s = np.linspace(-np.arcsinh(self._SPLINE_LIMIT), np.arcsinh(self._SPLINE_LIMIT), 4000)
        return interpolate.CubicSpline(s, np.arcsinh(self.cond_to_scores_exact(np.sinh(s))))

    def cond_to_scores(self, a):
        a = np.asarray(a, dtype=float)
        out = np.sinh(self._score_spline(np.arcsinh(a)))
        # infinite arguments map to themselves, NaN stays NaN
        out = np.where(np.isinf(a) | np.isnan(a), a, out)
        far = np.isfinite(a) & (np.abs(a) > self._SPLINE_LIMIT)
        if np.any(far):
            out[far] = self.cond_to_scores_exact(a[far])
        return out

    @cached_property
    def _tail_spline(self):
        # log T_{nu+1}(-r) for r >= 0, tabulated against asinh(r)
        s = np.linspace(0.0, np.arcsinh(self._SPLINE_LIMIT), 4000)
        return interpolate.CubicSpline(s, np.log(special.stdtr(self.nu + 1, -np.sinh(s))))

    def _cond_cdf_fast(self, a):
        r = np.abs(a)
        tail = np.exp(self._tail_spline(np.arcsinh(r)))
        tail = np.where(np.isinf(r), 0.0, tail)
        far = np.isfinite(r) & (r > self._SPLINE_LIMIT)
        if np.any(far):
            tail[far] = special.stdtr(self.nu + 1, -r[far])
        return np.where(a <= 0, tail, 1.0 - tail)

    def cond_log_diff(self, a_hi, a_lo):
        a_hi, a_lo = np.broadcast_arrays(np.asarray(a_hi, float), np.asarray(a_lo, float))
        # reflect so the lower end sits in the left tail
        flip = a_lo > 0
        lo = np.where(flip, -a_hi, a_lo)
        hi = np.where(flip, -a_lo, a_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = self._cond_cdf_fast(hi) - self._cond_cdf_fast(lo)
            return np.log(np.maximum(p, 0.0))

    def inv_cond_arg(self, a, x2, rho):
        nu = self.nu
        return a * np.sqrt((nu + x2 * x2) * (1.0 - rho * rho) / (nu + 1)) + rho * x2

    def cond_ppf(self, w):
        return t_ppf(self.nu + 1, w)


def t_ppf(nu: float, p):
    """Student-t quantile, computed through the nearer tail; +-inf at 1 and 0."""
    p = np.asarray(p, dtype=float)
    q = np.minimum(p, 1.0 - p)
    with np.errstate(invalid="ignore"):
        x = -special.stdtrit(nu, q)
    x = np.where(q > 0, x, np.inf)
    x = np.where(q == 0.5, 0.0, x)
    return np.where(np.isnan(p), np.nan, np.where(p < 0.5, -x, x))


@lru_cache(maxsize=64)
def kernel(family: Family | str, nu: float | None = None):
    family = Family(family)
    if family is Family.GAUSSIAN:
        return GaussianKernel()
    if nu is None:
        raise DomainError("student_t kernel needs nu")
    return StudentTKernel(float(nu))


def log_ndtr_diff(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo <= hi, accurate in both tails."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    # reflect so the interval sits in the lower tail
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb = special.log_ndtr(b)
    la = special.log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    return np.where(a >= b, -np.inf, out)


def _clamp(u):
    u = np.asarray(u, dtype=float)
    c = np.clip(u, EPS, 1.0 - EPS)
    return c, bool(np.any(c != u))


def uni_cdf(family: str, x, nu: float | None = None):
    """Standard normal (``family="normal"``) or Student-t cdf."""
    if family in ("normal", Family.GAUSSIAN, "gaussian"):
        return special.ndtr(x)
    if nu is None or nu <= 0:
        raise DomainError("student_t needs nu > 0")
    return special.stdtr(nu, x)


def uni_quantile(family: str, p, nu: float | None = None):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0) | (p_arr >= 1)) or np.any(np.isnan(p_arr)):
        raise DomainError("quantile argument must lie in (0, 1)")
    if family in ("normal", Family.GAUSSIAN, "gaussian"):
        return special.ndtri(p)
    if nu is None or nu <= 0:
        raise DomainError("student_t needs nu > 0")
    return t_ppf(nu, p)


def bicop_logpdf(u1, u2, p: BicopParam):
    k = p.kernel
    u1, _ = _clamp(u1)
    u2, _ = _clamp(u2)
    return k.log_pdf(k.ppf(u1), k.ppf(u2), p.rho)


def bicop_pdf(u1, u2, p: BicopParam, with_flag: bool = False):
    """Copula density c(u1, u2).

    Boundary arguments are clamped into [1e-12, 1 - 1e-12]; with
    ``with_flag=True`` a second value reports whether clamping happened.
    """
    k = p.kernel
    c1, f1 = _clamp(u1)
    c2, f2 = _clamp(u2)
    val = np.exp(k.log_pdf(k.ppf(c1), k.ppf(c2), p.rho))
    return (val, f1 or f2) if with_flag else val


def hfun(u1, u2, p: BicopParam, with_flag: bool = False):
    """Conditional cdf C_{1|2}(u1 | u2)."""
    k = p.kernel
    c1, f1 = _clamp(u1)
    c2, f2 = _clamp(u2)
    val = k.cond_cdf(k.cond_arg(k.ppf(c1), k.ppf(c2), p.rho))
    return (val, f1 or f2) if with_flag else val


def hinv(w, u2, p: BicopParam):
    """Inverse of :func:`hfun` in its first argument."""
    k = p.kernel
    w, _ = _clamp(w)
    u2, _ = _clamp(u2)
    x1 = k.inv_cond_arg(k.cond_ppf(w), k.ppf(u2), p.rho)
    return k.cdf(x1)
