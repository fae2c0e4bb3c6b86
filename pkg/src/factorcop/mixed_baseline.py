"""Random-intercept (RI) and random-intercept-and-slope (RIS) baselines.

The conditional model is the stage-1 marginal family with linear predictor
``x beta + d b``, where ``d = (1, slope_scale * t)`` and the random effects
``b`` are independent normals. The marginal likelihood integrates ``b`` out
with a fixed (non-adaptive) Gauss-Hermite tensor rule.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import marginals as mg
from .dataset import LongitudinalDataset
from .errors import ConvergenceError, DomainError
from .factor_model import LOG_FLOOR, aic_bic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixedSpec:
    """``n_random`` is 1 (RI) or 2 (RIS); the slope column is ``slope_scale * t``."""

    n_random: int = 1
    slope_scale: float = 1.0
    n_quad: int = 15

    def __post_init__(self):
        if self.n_random not in (1, 2):
            raise DomainError("n_random must be 1 or 2")
        if self.n_quad < 2:
            raise DomainError("need at least 2 quadrature nodes")

    @property
    def name(self) -> str:
        return "RI" if self.n_random == 1 else "RIS"


@dataclass
class MixedParams:
    marginal: mg.MarginalParams
    variances: np.ndarray

    def __post_init__(self):
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=float))


def _grid(spec: MixedSpec):
    z, w = special.roots_hermitenorm(spec.n_quad)
    w = w / w.sum()
    Z = np.array(list(itertools.product(z, repeat=spec.n_random)))
    W = np.prod(np.array(list(itertools.product(w, repeat=spec.n_random))), axis=1)
    return Z, np.log(W)


def design(data: LongitudinalDataset, spec: MixedSpec) -> np.ndarray:
    cols = [np.ones(data.n_obs)]
    if spec.n_random == 2:
        cols.append(spec.slope_scale * data.time)
    return np.column_stack(cols)


def _free(data, params: MixedParams) -> np.ndarray:
    if np.any(params.variances <= 0):
        raise DomainError("random-effect variances must be positive")
    return np.concatenate([mg.to_free(data, params.marginal), np.log(params.variances)])


def _unpack(data, spec, theta):
    k = len(theta) - spec.n_random
    return mg.from_free(data, theta[:k]), np.exp(theta[k:])


def loglik_free(data: LongitudinalDataset, spec: MixedSpec, theta: np.ndarray):
    """Per-subject marginal log-likelihoods and the total gradient.

    The gradient uses the posterior node weights: for log V_k the chain rule
    through ``b_k = sqrt(V_k) z_k`` contributes ``d_k b_k / 2`` per unit of
    d loglik / d eta.
    """
    theta = np.asarray(theta, dtype=float)
    fam = mg.family_for(data.kind, data.n_categories)
    p = data.X.shape[1]
    r = spec.n_random
    n_ex = len(theta) - p - r
    beta, free, logv = theta[:p], theta[p:p + n_ex], theta[p + n_ex:]
    Z, logw = _grid(spec)
    B = Z * np.exp(0.5 * logv)                       # (Q, r)
    Dm = design(data, spec)                          # (n, r)
    eta = (data.X @ beta)[:, None] + Dm @ B.T        # (n, Q)
    lp, d_eta, d_free = fam.logpdf_grad(data.y[:, None], eta, free)
    per = np.add.reduceat(lp, data.starts, axis=0) + logw[None, :]   # (m, Q)
    top = per.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    sub = np.log(np.exp(per - top).sum(axis=1)) + top[:, 0]
    floored = ~(sub > LOG_FLOOR)
    sub = np.where(floored, LOG_FLOOR, sub)
    post = np.exp(per - sub[:, None])                 # posterior weights (m, Q)
    post = np.where(floored[:, None], 0.0, post)
    post_obs = post[data.subject_index]               # (n, Q)
    g_beta = data.X.T @ (post_obs * d_eta).sum(axis=1)
    g_free = np.einsum("nq,nqk->k", post_obs, d_free) if n_ex else np.zeros(0)
    g_logv = 0.5 * np.einsum("nq,nr,qr->r", post_obs * d_eta, Dm, B)
    grad = np.concatenate([g_beta, g_free, g_logv])
    return sub, grad, int(floored.sum())


def mixed_loglik(data: LongitudinalDataset, spec: MixedSpec, params: MixedParams) -> float:
    """Marginal log-likelihood sum_i log int prod_j f(y_ij | b) g(b) db."""
    mg.validate_params(data, params.marginal)
    if params.variances.shape != (spec.n_random,):
        raise DomainError(f"expected {spec.n_random} variances")
    sub, _, _ = loglik_free(data, spec, _free(data, params))
    return float(sub.sum())


@dataclass
class MixedFit:
    spec: MixedSpec
    params: MixedParams
    names: list[str]
    se: np.ndarray
    loglik: float
    dim: int
    aic: float
    bic: float
    m: int
    converged: bool
    n_eval: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def model_name(self) -> str:
        return self.spec.name

    def estimates(self) -> dict[str, float]:
        mp = self.params.marginal
        vals = list(mp.beta)
        if mp.dispersion is not None:
            vals.append(mp.dispersion)
        if mp.thresholds is not None:
            vals.extend(mp.thresholds)
        vals.extend(self.params.variances)
        return dict(zip(self.names, map(float, vals)))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.name,
            "slope_scale": self.spec.slope_scale,
            "estimates": self.estimates(),
            "se": [float(s) for s in self.se],
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "quad": {"mode": "hermite", "n": self.spec.n_quad},
            "converged": self.converged,
            "warnings": list(self.warnings),
        }


def fit_mixed(
    data: LongitudinalDataset,
    spec: MixedSpec,
    init: MixedParams | None = None,
    maxiter: int | None = None,
) -> MixedFit:
    """Maximum marginal-likelihood fit; variances are optimized on the log scale.

    Starting values come from the independence fit, which also supplies the
    divergence check for degenerate discrete data.
    """
    if init is None:
        start = mg.fit_marginal(data)
        init = MixedParams(start.params, np.full(spec.n_random, 0.5))
    theta0 = _free(data, init)
    names = mg.parameter_names(data) + ["V[b0]", "V[b1]"][:spec.n_random]
    k = len(theta0)
    m = data.m
    maxiter = maxiter or 500 * k

    def fg(theta):
        sub, grad, _ = loglik_free(data, spec, theta)
        return sub.sum() / m, grad / m

    res, n_eval = mg.maximize(fg, theta0, maxiter)
    theta = res.x
    sub, grad, n_floor = loglik_free(data, spec, theta)
    params = MixedParams(*_unpack(data, spec, theta))
    score = np.max(np.abs(grad)) / data.n_obs
    converged = bool(score < 1e-4)
    warnings = []
    if n_floor:
        warnings.append(f"{n_floor} subjects hit the likelihood floor 1e-300")
    if not converged:
        raise ConvergenceError(
            f"{spec.name} fit did not converge (max |score|/n = {score:.2e})",
            best=params, stage="mixed")

    def natural(t):
        mp, v = _unpack(data, spec, t)
        return np.concatenate([mg.natural_vector(data, mp), v])

    H = mg.numerical_jacobian(lambda t: loglik_free(data, spec, t)[1], theta, step=1e-5)
    H = 0.5 * (H + H.T)
    try:
        cov_free = np.linalg.inv(-H)
        G = mg.numerical_jacobian(natural, theta, step=1e-6)
        se = np.sqrt(np.clip(np.diag(G @ cov_free @ G.T), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(k, np.nan)
        warnings.append("singular Hessian: standard errors unavailable")
    ll = float(sub.sum())
    aic, bic = aic_bic(ll, k, m)
    log.debug("%s fit: loglik=%.4f", spec.name, ll)
    return MixedFit(spec, params, names, se, ll, k, aic, bic, m, converged, n_eval, warnings)


def simulate_mixed(kind, beta, variances, *, dispersion=None, thresholds=None,
                   slope_scale: float = 0.1, m: int = 200, d: int = 10,
                   prune_p: float = 0.8, seed: int = 0) -> LongitudinalDataset:
    """Data from the random-effects model with the standard simulation layout.

    Visits, covariates and innovations use the same per-subject streams as
    the factor-copula generator, so ``variances = 0`` reproduces the
    independent-GLM data for the same seed.
    """
    from .simulator import RandomEffectsTruth, SimDesign, generate_dataset

    design = SimDesign(kind, tuple(beta), RandomEffectsTruth(tuple(variances), slope_scale),
                       dispersion=dispersion, thresholds=thresholds, m=m, d=d,
                       prune_p=prune_p, seed=seed)
    return generate_dataset(design)
