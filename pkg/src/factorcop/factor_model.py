"""Stage 2 of IFM: 1- and 2-factor copula likelihoods, fitting and inference.

All subjects share one linking copula per factor (exchangeable dependence),
so the model works for any number of visits per subject. Integrals over the
latent factors use a fixed quadrature rule on (0, 1); per-subject products
are accumulated in log space and combined with log-sum-exp over the nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import marginals as mg
from .bicopula import Family, kernel
from .dataset import LongitudinalDataset
from .errors import ConvergenceError, DomainError, GodambeError

log = logging.getLogger(__name__)

LOG_FLOOR = np.log(1e-300)
DEFAULT_NU_GRID = tuple(range(3, 31))
DEFAULT_QUAD_N = 15
DEFAULT_QUAD_MODE = "hermite-probit"
QUAD_MODES = ("hermite-probit", "legendre")


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes in (0, 1) with weights summing to one.

    ``scores`` are the standard normal quantiles of the nodes; Hermite nodes
    far in the tails round to exactly 0 or 1 on the u-scale, so downstream
    code works from the scores.
    """

    nodes: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    mode: str
    n: int

    def integrate(self, fn) -> float:
        return float(np.sum(self.weights * fn(self.nodes)))


def make_quadrature(n: int = DEFAULT_QUAD_N, mode: str = DEFAULT_QUAD_MODE) -> QuadratureRule:
    """Gauss rule for integrals over (0, 1).

    ``legendre`` maps Gauss-Legendre nodes affinely onto (0, 1).
    ``hermite-probit`` substitutes v = Phi(z) and integrates over z with the
    Gauss-Hermite rule for the standard normal weight.
    """
    if n < 2:
        raise DomainError(f"quadrature needs n >= 2 nodes, got {n}")
    if mode == "legendre":
        x, w = special.roots_legendre(n)
        v = 0.5 * (x + 1.0)
        w = 0.5 * w
        z = special.ndtri(v)
    elif mode == "hermite-probit":
        z, w = special.roots_hermitenorm(n)
        v = special.ndtr(z)
    else:
        raise DomainError(f"unknown quadrature mode {mode!r}")
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return QuadratureRule(v[keep], w, z[keep], mode, n)


# ------------------------------------------------------------------ specs


@dataclass(frozen=True)
class FactorCopulaSpec:
    """Exchangeable factor copula: one rho per factor, one shared nu.

    For the Student-t family ``nu=None`` means nu is profiled over a grid.
    """

    n_factors: int = 1
    family: Family = Family.GAUSSIAN
    nu: float | None = None
    exchangeable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n_factors not in (1, 2):
            raise DomainError("only 1- and 2-factor models are supported")
        if self.family is Family.GAUSSIAN and self.nu is not None:
            raise DomainError("nu only applies to the student_t family")
        if not self.exchangeable:
            raise DomainError("only exchangeable dependence is implemented")

    @property
    def name(self) -> str:
        fam = "gaussian" if self.family is Family.GAUSSIAN else "t"
        return f"{fam}-{self.n_factors}f"

    @property
    def profiles_nu(self) -> bool:
        return self.family is Family.STUDENT_T and self.nu is None


# ------------------------------------------------------------ likelihoods


class CopulaLikelihood:
    """Per-subject stage-2 log-likelihood for fixed PITs, family and nodes.

    Quantile transforms of the PITs and nodes are computed once here, so
    repeated evaluation over rho only costs elementary arithmetic (plus
    one quantile call per node pair for the 2-factor Student-t case).
    """

    def __init__(self, pits: mg.PitSample, family: Family | str, nu: float | None,
                 quad: QuadratureRule):
        self.k = kernel(Family(family), nu)
        self.pits = pits
        self.quad = quad
        s = self.k.from_normal_scores(quad.scores)
        # far-tail Hermite nodes can overflow the t quantile; their weight is negligible
        ok = np.isfinite(s)
        self.s = s[ok]
        self.logw = np.log(quad.weights[ok])
        self.starts = pits.starts
        # canonical within-subject order makes the sums exactly permutation invariant
        subject = np.repeat(np.arange(pits.m), pits.sizes)
        order = np.lexsort((pits.u_minus, pits.u, subject))
        with np.errstate(divide="ignore"):
            if pits.discrete:
                self.x_hi = self.k.ppf(pits.u[order])
                self.x_lo = self.k.ppf(pits.u_minus[order])
            else:
                self.x = self.k.ppf(pits.u[order])
        self.n_floor = 0

    def terms_1f(self, rho: float) -> np.ndarray:
        """log integrand per observation and node, shape (n_obs, Q)."""
        k, s = self.k, self.s[None, :]
        if not self.pits.discrete:
            return k.log_pdf(self.x[:, None], s, rho)
        a_hi = k.cond_arg(self.x_hi[:, None], s, rho)
        a_lo = k.cond_arg(self.x_lo[:, None], s, rho)
        return k.cond_log_diff(a_hi, a_lo)

    def terms_2f(self, rho1: float, rho2: float) -> np.ndarray:
        """log integrand per observation and node pair, shape (n_obs, Q, Q)."""
        k = self.k
        s1 = self.s[None, :]
        s2 = self.s[None, None, :]
        if not self.pits.discrete:
            x = self.x[:, None]
            y1 = k.cond_to_scores(k.cond_arg(x, s1, rho1))
            return k.log_pdf(x, s1, rho1)[:, :, None] + k.log_pdf(y1[:, :, None], s2, rho2)
        with np.errstate(invalid="ignore"):
            y_hi = k.cond_to_scores(k.cond_arg(self.x_hi[:, None], s1, rho1))
            y_lo = k.cond_to_scores(k.cond_arg(self.x_lo[:, None], s1, rho1))
        a_hi = k.cond_arg(y_hi[:, :, None], s2, rho2)
        a_lo = k.cond_arg(y_lo[:, :, None], s2, rho2)
        return k.cond_log_diff(a_hi, a_lo)

    def _reduce(self, terms: np.ndarray) -> np.ndarray:
        per_subject = np.add.reduceat(terms, self.starts, axis=0)
        logw = self.logw
        if per_subject.ndim == 3:
            logw = logw[:, None] + logw[None, :]
        flat = (per_subject + logw).reshape(len(self.starts), -1)
        with np.errstate(invalid="ignore"):
            vals = special.logsumexp(flat, axis=1)
        bad = ~np.isfinite(vals) | (vals < LOG_FLOOR)
        self.n_floor = int(bad.sum())
        return np.where(bad, LOG_FLOOR, vals)

    def subject_values(self, rhos) -> np.ndarray:
        rhos = np.atleast_1d(rhos)
        if len(rhos) == 1:
            return self._reduce(self.terms_1f(float(rhos[0])))
        return self._reduce(self.terms_2f(float(rhos[0]), float(rhos[1])))

    def __call__(self, rhos) -> float:
        return float(self.subject_values(rhos).sum())


def loglik_1f(pits: mg.PitSample, rho1: float, family: Family | str = Family.GAUSSIAN,
              nu: float | None = None, quad: QuadratureRule | None = None) -> float:
    """1-factor copula log-likelihood (copula density part for continuous data,
    full pmf for discrete data)."""
    _check_rho(rho1)
    return CopulaLikelihood(pits, family, nu, quad or make_quadrature())([rho1])


def loglik_2f(pits: mg.PitSample, rho1: float, rho2: float,
              family: Family | str = Family.GAUSSIAN, nu: float | None = None,
              quad: QuadratureRule | None = None) -> float:
    _check_rho(rho1)
    _check_rho(rho2)
    return CopulaLikelihood(pits, family, nu, quad or make_quadrature())([rho1, rho2])


def _check_rho(rho):
    if not -1.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")


# ------------------------------------------------------------- AIC / BIC


def aic_bic(loglik: float, dim: int, m: int) -> tuple[float, float]:
    if m < 1 or dim < 0:
        raise DomainError("aic_bic needs m >= 1 and dim >= 0")
    return -2.0 * loglik + 2.0 * dim, -2.0 * loglik + np.log(m) * dim


def select_model(values: dict[str, float], dims: dict[str, int]) -> str:
    """Name of the candidate with the smallest criterion value.

    Ties go to fewer parameters, then to the lexicographically first name.
    """
    return min(values, key=lambda name: (values[name], dims[name], name))


# ----------------------------------------------------------------- fitting


@dataclass
class FactorFit:
    spec: FactorCopulaSpec
    rho1: float
    rho2: float | None
    nu: float | None
    loglik: float
    loglik_copula: float
    dim: int
    aic: float
    bic: float
    m: int
    n_eval: int
    quad_mode: str
    quad_n: int
    se: np.ndarray | None = None
    converged: bool = True
    nu_profile: dict[float, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def rhos(self) -> np.ndarray:
        return np.array([self.rho1] if self.rho2 is None else [self.rho1, self.rho2])

    def to_dict(self) -> dict:
        out = {
            "spec": {"n_factors": self.spec.n_factors, "family": self.spec.family.value,
                     "nu_fixed": self.spec.nu},
            "rho1": self.rho1,
        }
        if self.rho2 is not None:
            out["rho2"] = self.rho2
        if self.nu is not None:
            out["nu"] = self.nu
        out.update(
            se=[] if self.se is None else [float(s) for s in self.se],
            loglik=self.loglik,
            loglik_copula=self.loglik_copula,
            dim=self.dim,
            aic=self.aic,
            bic=self.bic,
            quad={"mode": self.quad_mode, "n": self.quad_n},
            warnings=list(self.warnings),
        )
        if self.nu_profile:
            out["nu_profile"] = {str(k): v for k, v in self.nu_profile.items()}
        return out


def _optimize_rho(lik: CopulaLikelihood, starts: list[np.ndarray], rng: np.random.Generator,
                  restarts: int = 3):
    """Maximize the stage-2 log-likelihood over z = atanh(rho).

    Every start in ``starts`` is run; random restarts follow only when none
    of them converged.
    """
    m = len(lik.starts)
    k = len(starts[0])
    n_eval = [0]

    def f(z):
        n_eval[0] += 1
        if np.any(np.abs(z) > 15):
            return 1e10
        return -lik(np.tanh(z)) / m

    def run(start):
        res = optimize.minimize(f, start, method="BFGS", jac="3-point",
                                options={"gtol": 1e-7, "maxiter": 200 * k})
        if not res.success:
            nm = optimize.minimize(f, res.x, method="Nelder-Mead",
                                   options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 500 * k})
            if nm.fun <= res.fun:
                res = nm
                res.success = nm.success
        return res

    best = None
    for start in list(starts) + [None] * restarts:
        if start is None:
            if best.success:
                break
            start = rng.uniform(-1.5, 1.5, size=k)
        res = run(np.asarray(start, dtype=float))
        if best is None or res.fun < best.fun - 1e-12 or (res.success and not best.success
                                                          and res.fun <= best.fun + 1e-12):
            best = res
    return best, n_eval[0]


def fit_factor(
    pits: mg.PitSample,
    spec: FactorCopulaSpec,
    quad: QuadratureRule | None = None,
    nu_grid=DEFAULT_NU_GRID,
    marginal: mg.MarginalFit | None = None,
    seed: int = 0,
) -> FactorFit:
    """Estimate the dependence parameters from stage-1 PITs.

    For the Student-t family with ``spec.nu=None`` the optimization is run
    for every nu in ``nu_grid`` and the best log-likelihood wins. With a
    stage-1 ``marginal`` fit, ``loglik`` is the joint log-likelihood
    (marginal plus copula part for continuous data; the pmf already is the
    joint for discrete data) and ``dim`` counts both stages, a profiled nu
    included.
    """
    quad = quad or make_quadrature()
    rng = np.random.default_rng(seed)
    n_rho = spec.n_factors
    z0 = np.full(n_rho, np.arctanh(0.3))
    if spec.family is Family.GAUSSIAN:
        grid = [None]
    elif spec.nu is not None:
        grid = [float(spec.nu)]
    else:
        grid = [float(v) for v in nu_grid]
        if not grid:
            raise DomainError("empty nu grid")

    best = None
    profile = {}
    n_eval = 0
    last_err = None
    for nu in grid:
        lik = CopulaLikelihood(pits, spec.family, nu, quad)
        starts = [z0]
        if n_rho == 2:
            # with Gaussian links (rho1_hat, 0) reproduces the 1-factor optimum,
            # so starting there keeps the 2-factor maximum at or above it
            res1, ne = _optimize_rho(lik, [z0[:1]], rng)
            n_eval += ne
            starts.append(np.array([res1.x[0], 0.0]))
        res, ne = _optimize_rho(lik, starts, rng)
        n_eval += ne
        if not res.success and not _near_stationary(lik, res.x):
            last_err = ConvergenceError(
                f"stage-2 optimizer failed for nu={nu}: {res.message}", best=res.x, stage="copula")
            continue
        ll = lik(np.tanh(res.x))
        if nu is not None:
            profile[nu] = ll
        if best is None or ll > best[0]:
            best = (ll, nu, res.x.copy(), lik.n_floor)
        z0 = res.x.copy()
    if best is None:
        raise last_err
    ll_cop, nu, z, n_floor = best
    # each factor's sign is not identified; report the positive branch
    rhos = np.abs(np.tanh(z))
    warnings = []
    if n_floor:
        warnings.append(f"{n_floor} subjects hit the likelihood floor 1e-300")
    if n_rho == 2 and spec.family is Family.GAUSSIAN:
        warnings.append("exchangeable Gaussian 2-factor links identify only "
                        "rho1^2 + rho2^2 (1 - rho1^2); rho1 and rho2 are not separately identified")

    dim = n_rho + (1 if spec.profiles_nu else 0)
    if marginal is not None:
        dim += marginal.n_params
        ll_total = ll_cop if pits.discrete else ll_cop + marginal.loglik
    else:
        ll_total = ll_cop
    aic, bic = aic_bic(ll_total, dim, pits.m)
    return FactorFit(
        spec=spec, rho1=float(rhos[0]), rho2=float(rhos[1]) if n_rho == 2 else None,
        nu=nu, loglik=float(ll_total), loglik_copula=float(ll_cop), dim=dim, aic=aic, bic=bic,
        m=pits.m, n_eval=n_eval, quad_mode=quad.mode, quad_n=quad.n,
        nu_profile=profile, warnings=warnings,
    )


def _near_stationary(lik, z, tol=1e-4):
    m = len(lik.starts)
    h = 1e-5
    g = [(lik(np.tanh(z + h * e)) - lik(np.tanh(z - h * e))) / (2 * h * m) for e in np.eye(len(z))]
    return bool(np.max(np.abs(g)) < tol)


# ------------------------------------------------------------ Godambe SEs


@dataclass
class GodambeResult:
    """Sandwich information J = D' M^{-1} D per subject.

    ``D`` and ``M`` are on the optimizer (free) scale; ``cov`` and ``se``
    are mapped to the natural parameters listed in ``names``.
    """

    D: np.ndarray
    M: np.ndarray
    J: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    names: list[str]
    m: int

    def to_dict(self) -> dict:
        return {"names": self.names, "se": self.se.tolist(), "D": self.D.tolist(),
                "M": self.M.tolist(), "J": self.J.tolist(), "m": self.m}


def sandwich(psi, theta: np.ndarray, step: float = 1e-5):
    """D, M, J and the free-scale covariance for per-subject scores ``psi``.

    ``psi(theta)`` returns an (m, k) array of estimating-function values.
    D is the central-difference Jacobian of their mean.
    """
    theta = np.asarray(theta, dtype=float)
    scores = psi(theta)
    m = scores.shape[0]
    M = scores.T @ scores / m
    D = mg.numerical_jacobian(lambda t: psi(t).mean(axis=0), theta, step=step)
    if _ill_conditioned(M) or _ill_conditioned(D.T @ D):
        raise GodambeError(
            "singular Godambe information; more data or a simpler model is needed")
    try:
        Minv = np.linalg.inv(M)
        J = D.T @ Minv @ D
        J = 0.5 * (J + J.T)
        cov = np.linalg.inv(J) / m
    except np.linalg.LinAlgError:
        raise GodambeError(
            "singular Godambe information; more data or a simpler model is needed") from None
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
        raise GodambeError(
            "Godambe information is not positive definite; more data or a simpler model is needed")
    return D, M, J, cov


def _ill_conditioned(A, limit=1e12) -> bool:
    d = np.sqrt(np.abs(np.diag(A)))
    if np.any(d == 0) or not np.all(np.isfinite(A)):
        return True
    return bool(np.linalg.cond(A / np.outer(d, d)) > limit)


def godambe_se(
    data: LongitudinalDataset,
    marginal: mg.MarginalFit,
    factor: FactorFit,
    quad: QuadratureRule | None = None,
    step: float = 1e-5,
) -> GodambeResult:
    """Standard errors of all stage-1 and stage-2 parameters.

    Stage-1 scores are analytic; stage-2 scores are central differences of
    the per-subject copula log-likelihood in atanh(rho). The stage-2 rows of
    D include the dependence on the marginal parameters through the PITs.
    nu is held at its selected value.
    """
    quad = quad or make_quadrature(factor.quad_n, factor.quad_mode)
    n_marg = len(marginal.theta_free)
    n_rho = factor.spec.n_factors
    theta = np.concatenate([marginal.theta_free, np.arctanh(factor.rhos)])
    family, nu = factor.spec.family, factor.nu

    def psi(t):
        t_m = t[:n_marg]
        s1 = mg.subject_scores(data, t_m)
        lik = CopulaLikelihood(mg.pit(data, mg.from_free(data, t_m)), family, nu, quad)
        z = t[n_marg:]
        s2 = np.empty((data.m, n_rho))
        for k in range(n_rho):
            e = np.zeros(n_rho)
            e[k] = step
            s2[:, k] = (lik.subject_values(np.tanh(z + e))
                        - lik.subject_values(np.tanh(z - e))) / (2 * step)
        return np.column_stack([s1, s2])

    D, M, J, cov_free = sandwich(psi, theta, step=step)

    def natural(t):
        return np.concatenate([mg.natural_vector(data, mg.from_free(data, t[:n_marg])),
                               np.tanh(t[n_marg:])])

    G = mg.numerical_jacobian(natural, theta, step=1e-6)
    cov = G @ cov_free @ G.T
    se = np.sqrt(np.diag(cov))
    names = marginal.names + [f"rho{k + 1}" for k in range(n_rho)]
    return GodambeResult(D, M, J, cov, se, names, data.m)


# ----------------------------------------------------------- two-stage fit


@dataclass
class TwoStageFit:
    marginal: mg.MarginalFit
    factor: FactorFit
    godambe: GodambeResult | None = None

    def estimates(self) -> dict[str, float]:
        out = self.marginal.estimates()
        out["rho1"] = self.factor.rho1
        if self.factor.rho2 is not None:
            out["rho2"] = self.factor.rho2
        return out

    def standard_errors(self) -> dict[str, float]:
        if self.godambe is None:
            return {}
        return dict(zip(self.godambe.names, map(float, self.godambe.se)))


def fit_two_stage(
    data: LongitudinalDataset,
    spec: FactorCopulaSpec,
    quad: QuadratureRule | None = None,
    nu_grid=DEFAULT_NU_GRID,
    godambe: bool = True,
    marginal: mg.MarginalFit | None = None,
    strict_se: bool = True,
) -> TwoStageFit:
    """IFM: marginal fit, PITs, dependence fit, optional Godambe SEs.

    With ``strict_se=False`` a singular Godambe matrix leaves the SEs empty
    and adds a warning instead of raising.
    """
    quad = quad or make_quadrature()
    marginal = marginal or mg.fit_marginal(data)
    pits = mg.pit(data, marginal.params)
    factor = fit_factor(pits, spec, quad, nu_grid, marginal=marginal)
    result = TwoStageFit(marginal, factor)
    if godambe:
        try:
            result.godambe = godambe_se(data, marginal, factor, quad)
        except GodambeError as exc:
            if strict_se:
                raise
            factor.warnings.append(str(exc))
        else:
            factor.se = result.godambe.se[marginal.n_params:]
    return result
