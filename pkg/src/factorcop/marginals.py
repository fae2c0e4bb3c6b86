"""Stage-1 marginal models and probability integral transforms.

Continuous responses use GLMs (Gamma with log link, Normal with identity
link); binary and ordinal responses use a probit latent-variable model
``Z = x beta + eps`` with thresholds. Each family works with two parameter
vectors:

* natural: ``beta`` followed by the dispersion (Gamma shape kappa, Normal
  variance phi) or the ordinal thresholds;
* free: the same with ``log kappa``, ``log phi`` or
  ``(gamma_1, log(gamma_2 - gamma_1), ...)`` so the optimizer is
  unconstrained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .bicopula import log_ndtr_diff
from .dataset import INTERCEPT, LongitudinalDataset, ResponseKind
from .errors import ConvergenceError, DomainError

log = logging.getLogger(__name__)

PIT_EPS = 1e-12
LOG2PI = np.log(2.0 * np.pi)
# |beta| beyond this on the probit scale signals (quasi-)separation
SEPARATION_BOUND = 30.0


@dataclass
class MarginalParams:
    beta: np.ndarray
    dispersion: float | None = None
    thresholds: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.thresholds is not None:
            self.thresholds = np.asarray(self.thresholds, dtype=float)


class _Family:
    """Per-observation log-likelihood, PIT and inverse PIT for one family."""

    kind: ResponseKind

    def n_extra(self, K: int | None) -> int:
        raise NotImplementedError

    def extra_natural(self, params: MarginalParams) -> np.ndarray:
        raise NotImplementedError

    def params_from(self, beta, extra) -> MarginalParams:
        raise NotImplementedError

    def free_from_natural(self, extra):
        raise NotImplementedError

    def natural_from_free(self, free):
        raise NotImplementedError

    def logpdf_grad(self, y, eta, free):
        """Return log f, d log f / d eta and d log f / d free (last axis)."""
        raise NotImplementedError

    def bounds(self, y, eta, extra):
        """(u_minus, u) for each observation."""
        raise NotImplementedError

    def quantile(self, u, eta, extra):
        raise NotImplementedError


class _Gamma(_Family):
    kind = ResponseKind.GAMMA

    def n_extra(self, K):
        return 1

    def extra_natural(self, params):
        return np.array([params.dispersion], dtype=float)

    def params_from(self, beta, extra):
        return MarginalParams(beta, dispersion=float(extra[0]))

    def free_from_natural(self, extra):
        return np.log(extra)

    def natural_from_free(self, free):
        return np.exp(free)

    def logpdf_grad(self, y, eta, free):
        lk = free[0]
        k = np.exp(lk)
        r = y * np.exp(-eta)  # y / mu
        logy = np.log(y)
        ll = k * lk - special.gammaln(k) - k * eta + (k - 1.0) * logy - k * r
        d_eta = k * (r - 1.0)
        d_lk = k * (lk + 1.0 - special.digamma(k) - eta + logy - r)
        return ll, d_eta, d_lk[..., None]

    def bounds(self, y, eta, extra):
        k = extra[0]
        u = special.gammainc(k, k * y * np.exp(-eta))
        return u, u

    def quantile(self, u, eta, extra):
        k = extra[0]
        return special.gammaincinv(k, u) * np.exp(eta) / k


class _Normal(_Family):
    kind = ResponseKind.NORMAL

    def n_extra(self, K):
        return 1

    def extra_natural(self, params):
        return np.array([params.dispersion], dtype=float)

    def params_from(self, beta, extra):
        return MarginalParams(beta, dispersion=float(extra[0]))

    def free_from_natural(self, extra):
        return np.log(extra)

    def natural_from_free(self, free):
        return np.exp(free)

    def logpdf_grad(self, y, eta, free):
        lphi = free[0]
        phi = np.exp(lphi)
        r = y - eta
        q = r * r / phi
        ll = -0.5 * (LOG2PI + lphi + q)
        d_eta = r / phi
        d_lphi = -0.5 + 0.5 * q
        return ll, d_eta, d_lphi[..., None]

    def bounds(self, y, eta, extra):
        u = special.ndtr((y - eta) / np.sqrt(extra[0]))
        return u, u

    def quantile(self, u, eta, extra):
        return eta + np.sqrt(extra[0]) * special.ndtri(u)


class _Probit(_Family):
    """Binary (fixed threshold 0) and ordinal (K - 1 free thresholds) probit."""

    def __init__(self, kind: ResponseKind, K: int):
        self.kind = kind
        self.K = K

    def n_extra(self, K):
        return 0 if self.kind is ResponseKind.BINARY else self.K - 1

    def extra_natural(self, params):
        if self.kind is ResponseKind.BINARY:
            return np.zeros(0)
        return np.asarray(params.thresholds, dtype=float)

    def params_from(self, beta, extra):
        if self.kind is ResponseKind.BINARY:
            return MarginalParams(beta)
        return MarginalParams(beta, thresholds=np.asarray(extra, dtype=float))

    def free_from_natural(self, extra):
        extra = np.asarray(extra, dtype=float)
        if extra.size == 0:
            return extra
        return np.concatenate([extra[:1], np.log(np.diff(extra))])

    def natural_from_free(self, free):
        free = np.asarray(free, dtype=float)
        if free.size == 0:
            return free
        return np.cumsum(np.concatenate([free[:1], np.exp(free[1:])]))

    def cutpoints(self, extra):
        """Full threshold vector gamma(0..K) with infinite ends."""
        if self.kind is ResponseKind.BINARY:
            inner = np.zeros(1)
        else:
            inner = np.asarray(extra, dtype=float)
        return np.concatenate([[-np.inf], inner, [np.inf]])

    def _category(self, y):
        # binary codes 0/1 become categories 1/2
        y = np.asarray(y)
        return (y + 1 if self.kind is ResponseKind.BINARY else y).astype(np.int64)

    def logpdf_grad(self, y, eta, free):
        extra = self.natural_from_free(free)
        cut = self.cutpoints(extra)
        k = self._category(y)
        hi = cut[k] - eta
        lo = cut[k - 1] - eta
        lp = log_ndtr_diff(lo, hi)
        with np.errstate(over="ignore"):
            g_hi = np.exp(-0.5 * hi * hi - 0.5 * LOG2PI - lp)
            g_lo = np.exp(-0.5 * lo * lo - 0.5 * LOG2PI - lp)
        g_hi = np.where(np.isfinite(hi), g_hi, 0.0)
        g_lo = np.where(np.isfinite(lo), g_lo, 0.0)
        d_eta = -(g_hi - g_lo)
        n_ex = self.n_extra(self.K)
        shape = np.broadcast_shapes(np.shape(y), np.shape(eta))
        d_free = np.zeros(shape + (n_ex,))
        if n_ex:
            # d lp / d gamma_l for the inner thresholds l = 1..K-1
            d_gamma = np.zeros(shape + (n_ex,))
            kb = np.broadcast_to(k, shape)
            for l in range(1, n_ex + 1):
                d_gamma[..., l - 1] = np.where(kb == l, g_hi, 0.0) - np.where(kb == l + 1, g_lo, 0.0)
            # chain rule: gamma_l = free_0 + sum_{2<=s<=l} exp(free_{s-1})
            e = np.exp(free[1:])
            tail = np.cumsum(d_gamma[..., ::-1], axis=-1)[..., ::-1]
            d_free[..., 0] = tail[..., 0]
            if n_ex > 1:
                d_free[..., 1:] = tail[..., 1:] * e
        return lp, d_eta, d_free

    def bounds(self, y, eta, extra):
        cut = self.cutpoints(extra)
        k = self._category(y)
        return special.ndtr(cut[k - 1] - eta), special.ndtr(cut[k] - eta)

    def quantile(self, u, eta, extra):
        """Category code with cdf(k - 1) < u <= cdf(k)."""
        cut = self.cutpoints(extra)[1:-1]
        cdf = special.ndtr(cut[None, :] - np.asarray(eta, float)[:, None])
        k = 1 + (np.asarray(u, float)[:, None] > cdf).sum(axis=1)
        return k - 1 if self.kind is ResponseKind.BINARY else k


def family_for(kind: ResponseKind | str, K: int | None = None) -> _Family:
    kind = ResponseKind(kind)
    if kind is ResponseKind.GAMMA:
        return _Gamma()
    if kind is ResponseKind.NORMAL:
        return _Normal()
    if kind is ResponseKind.BINARY:
        return _Probit(kind, 2)
    if K is None or K < 2:
        raise DomainError("ordinal family needs K >= 2")
    return _Probit(kind, int(K))


def n_marginal_params(kind: ResponseKind | str, p: int, K: int | None = None) -> int:
    return p + family_for(kind, K).n_extra(K)


def parameter_names(data: LongitudinalDataset) -> list[str]:
    names = [f"beta[{n}]" for n in data.covariate_names]
    if data.kind is ResponseKind.GAMMA:
        names.append("kappa")
    elif data.kind is ResponseKind.NORMAL:
        names.append("phi")
    elif data.kind is ResponseKind.ORDINAL:
        names += [f"gamma{k}" for k in range(1, data.n_categories)]
    return names


def validate_params(data: LongitudinalDataset, params: MarginalParams) -> None:
    p = data.X.shape[1]
    if params.beta.shape != (p,):
        raise DomainError(f"beta must have length {p}, got {params.beta.shape}")
    if data.kind in (ResponseKind.GAMMA, ResponseKind.NORMAL):
        if params.dispersion is None or not params.dispersion > 0:
            raise DomainError(f"dispersion must be positive, got {params.dispersion}")
    if data.kind is ResponseKind.ORDINAL:
        g = params.thresholds
        if g is None or g.shape != (data.n_categories - 1,):
            raise DomainError(f"ordinal model needs {data.n_categories - 1} thresholds")
        if np.any(np.diff(g) <= 0):
            raise DomainError("thresholds must be strictly increasing")


def to_free(data: LongitudinalDataset, params: MarginalParams) -> np.ndarray:
    fam = family_for(data.kind, data.n_categories)
    return np.concatenate([params.beta, fam.free_from_natural(fam.extra_natural(params))])


def from_free(data: LongitudinalDataset, theta: np.ndarray) -> MarginalParams:
    fam = family_for(data.kind, data.n_categories)
    p = data.X.shape[1]
    return fam.params_from(theta[:p].copy(), fam.natural_from_free(theta[p:]))


def natural_vector(data: LongitudinalDataset, params: MarginalParams) -> np.ndarray:
    fam = family_for(data.kind, data.n_categories)
    return np.concatenate([params.beta, fam.extra_natural(params)])


def _obs_terms(data: LongitudinalDataset, theta: np.ndarray):
    fam = family_for(data.kind, data.n_categories)
    p = data.X.shape[1]
    eta = data.X @ theta[:p]
    ll, d_eta, d_free = fam.logpdf_grad(data.y, eta, theta[p:])
    grad = np.concatenate([d_eta[:, None] * data.X, d_free], axis=1)
    return ll, grad


def loglik_free(data: LongitudinalDataset, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Total log-likelihood and its gradient in the free parameterization."""
    ll, grad = _obs_terms(data, theta)
    return float(ll.sum()), grad.sum(axis=0)


def subject_scores(data: LongitudinalDataset, theta: np.ndarray) -> np.ndarray:
    """Per-subject score vectors (m, k) in the free parameterization."""
    _, grad = _obs_terms(data, theta)
    return np.add.reduceat(grad, data.starts, axis=0)


def marginal_loglik_obs(data: LongitudinalDataset, params: MarginalParams) -> np.ndarray:
    validate_params(data, params)
    ll, _ = _obs_terms(data, to_free(data, params))
    return ll


def marginal_loglik(data: LongitudinalDataset, params: MarginalParams) -> float:
    """Independence log-likelihood sum_i sum_j log f(y_ij | theta_ij)."""
    return float(marginal_loglik_obs(data, params).sum())


@dataclass
class PitSample:
    """Upper and lower PIT values for every observation.

    ``starts`` holds the offset of each subject's first observation, so the
    sample carries the grouping needed by the factor-copula likelihoods.
    For continuous data ``u_minus`` is ``u``.
    """

    u: np.ndarray
    u_minus: np.ndarray
    discrete: bool
    starts: np.ndarray

    @property
    def m(self) -> int:
        return len(self.starts)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, len(self.u)))

    def permuted(self, perm: np.ndarray) -> "PitSample":
        return PitSample(self.u[perm], self.u_minus[perm], self.discrete, self.starts)


def pit(data: LongitudinalDataset, params: MarginalParams) -> PitSample:
    """PIT values F(y_ij) (and F(y_ij - 1) for discrete responses)."""
    validate_params(data, params)
    fam = family_for(data.kind, data.n_categories)
    eta = data.X @ params.beta
    lo, hi = fam.bounds(data.y, eta, fam.extra_natural(params))
    if data.kind.discrete:
        # exact 0 / 1 at the infinite thresholds are kept
        cat = fam._category(data.y)
        hi = np.where(cat == fam.K, 1.0, np.clip(hi, PIT_EPS, 1.0 - PIT_EPS))
        lo = np.where(cat == 1, 0.0, np.clip(lo, PIT_EPS, 1.0 - PIT_EPS))
        return PitSample(hi, lo, True, data.starts.copy())
    u = np.clip(hi, PIT_EPS, 1.0 - PIT_EPS)
    return PitSample(u, u.copy(), False, data.starts.copy())


@dataclass
class MarginalFit:
    kind: ResponseKind
    params: MarginalParams
    se: np.ndarray
    loglik: float
    converged: bool
    names: list[str]
    n_iter: int = 0
    cov: np.ndarray | None = None
    theta_free: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return len(self.names)

    def estimates(self) -> dict[str, float]:
        vals = list(self.params.beta)
        if self.params.dispersion is not None:
            vals.append(self.params.dispersion)
        if self.params.thresholds is not None:
            vals.extend(self.params.thresholds)
        return dict(zip(self.names, map(float, vals)))

    def to_dict(self) -> dict:
        out = {"family": self.kind.value, "beta": self.params.beta.tolist()}
        if self.params.dispersion is not None:
            out["dispersion"] = self.params.dispersion
        if self.params.thresholds is not None:
            out["thresholds"] = self.params.thresholds.tolist()
        out.update(
            names=self.names,
            se=[float(s) for s in self.se],
            loglik=self.loglik,
            converged=self.converged,
            warnings=list(self.warnings),
        )
        return out


def initial_params(data: LongitudinalDataset) -> MarginalParams:
    """Moment-based starting values."""
    X, y = data.X, data.y
    if data.kind is ResponseKind.NORMAL:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ beta
        return MarginalParams(beta, dispersion=max(float(r @ r) / len(y), 1e-8))
    if data.kind is ResponseKind.GAMMA:
        beta, *_ = np.linalg.lstsq(X, np.log(y), rcond=None)
        mu = np.exp(X @ beta)
        if data.covariate_names and data.covariate_names[0] == INTERCEPT:
            # E log y is biased below log mu
            beta[0] += np.log(np.mean(y / mu))
            mu = np.exp(X @ beta)
        cv2 = np.mean((y / mu - 1.0) ** 2)
        return MarginalParams(beta, dispersion=float(np.clip(1.0 / max(cv2, 1e-3), 0.05, 1e3)))
    p = X.shape[1]
    if data.kind is ResponseKind.BINARY:
        beta = np.zeros(p)
        if data.covariate_names and data.covariate_names[0] == INTERCEPT:
            pbar = np.clip(np.mean(y), 0.01, 0.99)
            beta[0] = special.ndtri(pbar)
        return MarginalParams(beta)
    K = data.n_categories
    counts = np.bincount(y.astype(int), minlength=K + 1)[1:]
    cum = np.clip(np.cumsum(counts)[:-1] / len(y), 0.01, 0.99)
    g = special.ndtri(cum)
    g = np.maximum.accumulate(g + 1e-3 * np.arange(K - 1))
    return MarginalParams(np.zeros(p), thresholds=g)


def numerical_jacobian(fun, x, step=1e-5, relative=True):
    """Central-difference Jacobian of a vector function (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    jac = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = step * max(1.0, abs(x[k])) if relative else step
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))).ravel() / (2 * h)
    return jac


def _unobserved_categories(data: LongitudinalDataset) -> list[int]:
    if not data.kind.discrete:
        return []
    codes = set(np.unique(data.y).astype(int).tolist())
    full = range(0, 2) if data.kind is ResponseKind.BINARY else range(1, data.n_categories + 1)
    return [c for c in full if c not in codes]


def maximize(fun_grad, theta0, maxiter, gtol=1e-7):
    """Maximize a function given as ``theta -> (value, gradient)``.

    Quasi-Newton (BFGS) with analytic gradients; when it stops without
    meeting the tolerance, a Nelder-Mead restart is run from the best point
    and BFGS is tried once more.
    """
    n_calls = [0]

    def neg(theta):
        n_calls[0] += 1
        v, g = fun_grad(theta)
        if not np.isfinite(v):
            return 1e300, np.zeros_like(theta)
        return -v, -g

    res = optimize.minimize(neg, theta0, jac=True, method="BFGS",
                            options={"gtol": gtol, "maxiter": maxiter})
    if not res.success:
        nm = optimize.minimize(lambda t: neg(t)[0], res.x, method="Nelder-Mead",
                               options={"maxiter": maxiter, "xatol": 1e-10, "fatol": 1e-12})
        res2 = optimize.minimize(neg, nm.x, jac=True, method="BFGS",
                                 options={"gtol": gtol, "maxiter": maxiter})
        if res2.fun <= res.fun:
            res = res2
    return res, n_calls[0]


def fit_marginal(
    data: LongitudinalDataset,
    init: MarginalParams | None = None,
    maxiter: int | None = None,
) -> MarginalFit:
    """Maximum likelihood fit of the marginal model under independence.

    Raises
    ------
    ConvergenceError
        If the optimizer does not reach the gradient tolerance, or if a
        discrete category is never observed (a threshold or intercept then
        escapes to infinity).
    """
    names = parameter_names(data)
    k = len(names)
    if data.n_obs < k:
        raise DomainError(f"{data.n_obs} observations for {k} parameters")
    init = init or initial_params(data)
    validate_params(data, init)
    theta0 = to_free(data, init)
    n = data.n_obs
    maxiter = maxiter or 500 * k

    def fg(theta):
        v, g = loglik_free(data, theta)
        return v / n, g / n

    res, n_calls = maximize(fg, theta0, maxiter)
    theta = res.x
    ll, grad = loglik_free(data, theta)
    params = from_free(data, theta)
    missing = _unobserved_categories(data)
    if missing:
        raise ConvergenceError(
            f"category codes {missing} never observed: a threshold escapes to infinity",
            best=params, stage="marginal",
        )
    warnings = []
    converged = bool(np.max(np.abs(grad / n)) < 1e-4)
    if data.kind.discrete and np.max(np.abs(params.beta)) > SEPARATION_BOUND:
        warnings.append("separation: coefficients diverge, estimates clamped")
        params.beta = np.clip(params.beta, -SEPARATION_BOUND, SEPARATION_BOUND)
        theta = to_free(data, params)
        ll, grad = loglik_free(data, theta)
    elif not converged:
        raise ConvergenceError(
            f"marginal fit did not converge (max |score|/n = {np.max(np.abs(grad / n)):.2e})",
            best=params, stage="marginal",
        )
    cov = _natural_cov(data, theta, lambda t: loglik_free(data, t)[1])
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    log.debug("marginal fit: loglik=%.4f after %d evaluations", ll, n_calls)
    return MarginalFit(data.kind, params, se, ll, converged, names, n_calls, cov, theta, warnings)


def _natural_cov(data, theta, grad_fn):
    """Inverse observed information mapped to the natural scale."""
    H = numerical_jacobian(grad_fn, theta, step=1e-5)
    H = 0.5 * (H + H.T)
    try:
        cov_free = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return np.full((len(theta), len(theta)), np.nan)
    G = numerical_jacobian(lambda t: natural_vector(data, from_free(data, t)), theta, step=1e-6)
    return G @ cov_free @ G.T
