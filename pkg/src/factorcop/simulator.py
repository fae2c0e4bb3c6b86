"""Simulation designs, data generation and the Monte Carlo study harness.

Every subject draws from its own counter-based stream
``Philox(SeedSequence([seed, i]))``: the number of visits, covariates and
the innovations ``w_ij`` come from that stream, while latent factors or
random effects come from a sibling stream ``SeedSequence([seed, i, 1])``.
Keeping the two apart means a zero-dependence design reproduces the plain
independent-GLM data exactly, and that generation is independent of the
worker layout.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import marginals as mg
from .bicopula import EPS, BicopParam, Family, hinv
from .dataset import INTERCEPT, LongitudinalDataset, Observation, ResponseKind, Subject
from .errors import DomainError, FactorCopError
from .factor_model import (
    DEFAULT_NU_GRID,
    DEFAULT_QUAD_MODE,
    DEFAULT_QUAD_N,
    FactorCopulaSpec,
    fit_two_stage,
    make_quadrature,
    select_model,
)
from .mixed_baseline import MixedSpec, fit_mixed

log = logging.getLogger(__name__)

COVARIATES = ("x1", "x2", "t")


# ---------------------------------------------------------------- designs


@dataclass(frozen=True)
class CopulaTruth:
    n_factors: int = 1
    family: str = "gaussian"
    rho1: float = 0.5
    rho2: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if self.n_factors not in (1, 2):
            raise DomainError("n_factors must be 1 or 2")
        if self.n_factors == 2 and self.rho2 is None:
            raise DomainError("a 2-factor truth needs rho2")
        # validates rho and nu
        BicopParam(Family(self.family), self.rho1, self.nu)

    @property
    def model_name(self) -> str:
        return FactorCopulaSpec(self.n_factors, self.family, self.nu).name

    def params(self) -> dict[str, float]:
        out = {"rho1": self.rho1}
        if self.n_factors == 2:
            out["rho2"] = self.rho2
        return out


@dataclass(frozen=True)
class RandomEffectsTruth:
    variances: tuple[float, ...] = (1.0,)
    slope_scale: float = 0.1

    def __post_init__(self):
        if len(self.variances) not in (1, 2) or any(v < 0 for v in self.variances):
            raise DomainError("one or two nonnegative random-effect variances expected")

    @property
    def model_name(self) -> str:
        return "RI" if len(self.variances) == 1 else "RIS"

    def params(self) -> dict[str, float]:
        return {f"V[b{k}]": float(v) for k, v in enumerate(self.variances)}


@dataclass(frozen=True)
class SimDesign:
    """A data-generating design.

    ``beta`` follows the covariate order (intercept,) x1, x2, time; the
    ordinal model has no intercept. ``dispersion`` is the Gamma shape or
    the Normal variance.
    """

    kind: ResponseKind
    beta: tuple[float, ...]
    generator: CopulaTruth | RandomEffectsTruth
    dispersion: float | None = None
    thresholds: tuple[float, ...] | None = None
    m: int = 200
    d: int = 10
    prune_p: float = 0.8
    seed: int = 0
    N: int = 500

    def __post_init__(self):
        object.__setattr__(self, "kind", ResponseKind(self.kind))
        if self.m < 1 or self.d < 1 or not 0 < self.prune_p <= 1:
            raise DomainError("need m >= 1, d >= 1 and prune_p in (0, 1]")
        mg.validate_params(_layout_only(self), self.marginal_params)

    @property
    def K(self) -> int | None:
        if self.kind is ResponseKind.ORDINAL:
            return len(self.thresholds) + 1
        return 2 if self.kind is ResponseKind.BINARY else None

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return ((INTERCEPT,) if self.kind.has_intercept else ()) + COVARIATES

    @property
    def marginal_params(self) -> mg.MarginalParams:
        return mg.MarginalParams(
            np.array(self.beta, dtype=float), self.dispersion,
            None if self.thresholds is None else np.array(self.thresholds, dtype=float))

    @property
    def model_name(self) -> str:
        return self.generator.model_name

    def truth(self) -> dict[str, float]:
        names = [f"beta[{n}]" for n in self.covariate_names]
        vals = list(self.beta)
        if self.kind is ResponseKind.GAMMA:
            names.append("kappa")
        elif self.kind is ResponseKind.NORMAL:
            names.append("phi")
        if self.dispersion is not None:
            vals.append(self.dispersion)
        if self.thresholds is not None:
            names += [f"gamma{k}" for k in range(1, len(self.thresholds) + 1)]
            vals += list(self.thresholds)
        out = dict(zip(names, map(float, vals)))
        out.update(self.generator.params())
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["generator_type"] = type(self.generator).__name__
        return out


def _layout_only(design: SimDesign) -> LongitudinalDataset:
    # minimal dataset used only to validate parameter shapes
    p = len(design.covariate_names)
    y = {ResponseKind.BINARY: 0.0, ResponseKind.ORDINAL: 1.0}.get(design.kind, 1.0)
    obs = (Observation(1.0, y, (0.0,) * p),)
    return LongitudinalDataset((Subject("0", obs),), design.kind, design.covariate_names, design.K)


_MARGINALS = {
    "gamma": dict(kind="gamma", beta=(1.0, -0.5, 0.2, 0.2), dispersion=3.0),
    "normal": dict(kind="normal", beta=(1.0, -0.5, 0.2, 0.2), dispersion=1.0),
    "binary": dict(kind="binary", beta=(-0.5, -0.5, 0.2, 0.2)),
    "ordinal": dict(kind="ordinal", beta=(-0.5, 0.2, 0.2), thresholds=(-1.0, 1.0, 3.0)),
}

_GENERATORS = {
    "1f-gauss": CopulaTruth(1, "gaussian", 0.5),
    "1f-t": CopulaTruth(1, "student_t", 0.5, nu=4.0),
    "2f-gauss": CopulaTruth(2, "gaussian", 0.5, 0.5),
    "2f-t": CopulaTruth(2, "student_t", 0.5, 0.5, nu=4.0),
    "ri": RandomEffectsTruth((1.0,)),
    "ris": RandomEffectsTruth((1.0, 1.0)),
}

PRESETS = tuple(f"{k}-{g}" for k in _MARGINALS for g in _GENERATORS)


def preset(name: str, **overrides) -> SimDesign:
    """Design by name, e.g. ``"gamma-1f-gauss"`` or ``"normal-ri"``.

    Random-effect presets default to N = 100 replications, the others to 500.
    """
    kind, _, gen = name.partition("-")
    if kind not in _MARGINALS or gen not in _GENERATORS:
        raise DomainError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    generator = _GENERATORS[gen]
    base = dict(_MARGINALS[kind], generator=generator)
    if isinstance(generator, RandomEffectsTruth):
        base["N"] = 100
    base.update(overrides)
    return SimDesign(**base)


# ------------------------------------------------------------- generation


def _streams(seed: int, i: int):
    main = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i])))
    latent = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i, 1])))
    return main, latent


def factor_uniforms(w: np.ndarray, v, truth: CopulaTruth) -> np.ndarray:
    """Map innovations ``w`` (..., n) and factor values ``v`` (..., n_factors)
    to copula uniforms."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    fam = Family(truth.family)
    p1 = BicopParam(fam, truth.rho1, truth.nu)
    v1 = np.broadcast_to(v[..., :1], w.shape)
    if truth.n_factors == 1:
        return hinv(w, v1, p1)
    p2 = BicopParam(fam, truth.rho2, truth.nu)
    inner = hinv(w, np.broadcast_to(v[..., 1:2], w.shape), p2)
    return hinv(inner, v1, p1)


def sample_factor_uniforms(n: int, truth: CopulaTruth, rng: np.random.Generator,
                           size: int | None = None) -> np.ndarray:
    """n exchangeable uniforms from the factor copula.

    With ``size`` the result has shape (size, n), one latent draw per row.
    """
    shape = () if size is None else (size,)
    v = rng.uniform(size=shape + (truth.n_factors,))
    w = rng.uniform(size=shape + (n,))
    return factor_uniforms(w, v, truth)


@dataclass(frozen=True)
class _Layout:
    n: int
    x1: float
    x2: float
    w: np.ndarray


def draw_layout(design: SimDesign, rng: np.random.Generator) -> _Layout:
    """Visits, covariates and innovations for one subject."""
    n = 0
    while n < 1:
        # zero-visit subjects are redrawn
        n = int(rng.binomial(design.d, design.prune_p))
    x1 = float(rng.binomial(1, 0.5))
    x2 = float(rng.uniform(3.0, 8.0))
    w = rng.uniform(size=n)
    return _Layout(n, x1, x2, w)


def _x_rows(design: SimDesign, lay: _Layout) -> np.ndarray:
    t = np.arange(1, lay.n + 1, dtype=float)
    cols = [np.full(lay.n, lay.x1), np.full(lay.n, lay.x2), t]
    if design.kind.has_intercept:
        cols.insert(0, np.ones(lay.n))
    return np.column_stack(cols)


def generate_dataset(design: SimDesign) -> LongitudinalDataset:
    """Draw one dataset of ``design.m`` subjects."""
    fam = mg.family_for(design.kind, design.K)
    params = design.marginal_params
    extra = fam.extra_natural(params)
    gen = design.generator
    subjects = []
    for i in range(design.m):
        main, latent = _streams(design.seed, i)
        lay = draw_layout(design, main)
        X = _x_rows(design, lay)
        eta = X @ params.beta
        if isinstance(gen, CopulaTruth):
            u = factor_uniforms(lay.w, latent.uniform(size=gen.n_factors), gen)
        else:
            b = latent.standard_normal(len(gen.variances)) * np.sqrt(gen.variances)
            eta = eta + b[0]
            if len(b) == 2:
                eta = eta + b[1] * gen.slope_scale * X[:, -1]
            u = lay.w
        u = np.clip(u, EPS, 1.0 - EPS)
        y = fam.quantile(u, eta, extra)
        obs = tuple(Observation(float(t), float(yy), tuple(map(float, row)))
                    for t, yy, row in zip(X[:, -1], y, X))
        subjects.append(Subject(str(i + 1), obs))
    return LongitudinalDataset(tuple(subjects), design.kind, design.covariate_names, design.K)


# ----------------------------------------------------------------- fitting


@dataclass(frozen=True)
class FitRecipe:
    """A candidate model and the numerical settings used to fit it.

    ``model`` is one of ``gaussian-1f``, ``t-1f``, ``gaussian-2f``, ``t-2f``,
    ``RI`` or ``RIS``. For t models ``nu=None`` profiles over ``nu_grid``.
    """

    model: str = "gaussian-1f"
    nu: float | None = None
    nu_grid: tuple[int, ...] = DEFAULT_NU_GRID
    quad_mode: str = DEFAULT_QUAD_MODE
    quad_n: int = DEFAULT_QUAD_N
    godambe: bool = True
    slope_scale: float = 0.1

    MODELS = ("gaussian-1f", "t-1f", "gaussian-2f", "t-2f", "RI", "RIS")

    def __post_init__(self):
        if self.model not in self.MODELS:
            raise DomainError(f"unknown model {self.model!r}")

    @property
    def is_mixed(self) -> bool:
        return self.model in ("RI", "RIS")

    def factor_spec(self) -> FactorCopulaSpec:
        fam, nf = self.model.split("-")
        return FactorCopulaSpec(int(nf[0]), "gaussian" if fam == "gaussian" else "student_t",
                                self.nu if fam == "t" else None)

    def fit(self, data: LongitudinalDataset, marginal: mg.MarginalFit | None = None) -> "FitSummary":
        if self.is_mixed:
            spec = MixedSpec(1 if self.model == "RI" else 2, self.slope_scale, self.quad_n)
            res = fit_mixed(data, spec)
            return FitSummary(self.model, res.estimates(), dict(zip(res.names, map(float, res.se))),
                              res.loglik, res.aic, res.bic, res.dim)
        quad = make_quadrature(self.quad_n, self.quad_mode)
        res = fit_two_stage(data, self.factor_spec(), quad, self.nu_grid,
                            godambe=self.godambe, marginal=marginal, strict_se=False)
        f = res.factor
        est = res.estimates()
        if f.nu is not None:
            est["nu"] = float(f.nu)
        return FitSummary(self.model, est, res.standard_errors(), f.loglik, f.aic, f.bic, f.dim)


@dataclass
class FitSummary:
    model: str
    estimates: dict[str, float]
    se: dict[str, float]
    loglik: float
    aic: float
    bic: float
    dim: int


def recipe_for(design: SimDesign, **kw) -> FitRecipe:
    """The recipe fitting the generating model class (t models at the true nu)."""
    gen = design.generator
    if isinstance(gen, RandomEffectsTruth):
        return FitRecipe(gen.model_name, slope_scale=gen.slope_scale, **kw)
    if gen.family == "student_t":
        kw.setdefault("nu", gen.nu)
    return FitRecipe(gen.model_name, **kw)


# ------------------------------------------------------------ Monte Carlo


@dataclass
class McRow:
    name: str
    true: float
    mean: float
    bias: float
    sd: float
    se: float
    rmse: float


@dataclass
class McReport:
    """Per-parameter Monte Carlo summary (Mean, Bias, SD, SE, RMSE)."""

    label: str
    rows: list[McRow]
    N: int
    n_ok: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, default=None)
    ses: np.ndarray = field(repr=False, default=None)

    def row(self, name: str) -> McRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"label": self.label, "N": self.N, "n_ok": self.n_ok, "n_failed": self.n_failed,
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "true", "mean", "bias", "sd", "se", "rmse"])
        for r in self.rows:
            w.writerow([r.name] + [f"{v:.4f}" for v in (r.true, r.mean, r.bias, r.sd, r.se, r.rmse)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Parameter':<18}{'True':>9}{'Mean':>9}{'Bias':>9}{'SD':>9}{'SE':>9}{'RMSE':>9}"
        lines = [f"{self.label}  (N = {self.N}, failed = {self.n_failed})", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.name:<18}" + "".join(
                f"{v:>9.4f}" for v in (r.true, r.mean, r.bias, r.sd, r.se, r.rmse)))
        return "\n".join(lines) + "\n"


def summarize_replications(label: str, truth: dict[str, float], estimates: np.ndarray,
                           ses: np.ndarray, n_failed: int = 0) -> McReport:
    """Build a report from an (n_ok, k) estimate matrix and matching SEs."""
    names = list(truth)
    est = np.asarray(estimates, dtype=float).reshape(-1, len(names))
    se = np.asarray(ses, dtype=float).reshape(-1, len(names))
    n_ok = est.shape[0]
    rows = []
    for k, name in enumerate(names):
        col = est[:, k]
        t = truth[name]
        mean = float(col.mean()) if n_ok else math.nan
        sd = float(col.std(ddof=1)) if n_ok > 1 else math.nan
        rmse = float(np.sqrt(np.mean((col - t) ** 2))) if n_ok else math.nan
        se_k = se[:, k]
        se_mean = float(np.mean(se_k)) if n_ok and np.all(np.isfinite(se_k)) else math.nan
        rows.append(McRow(name, t, mean, mean - t, sd, se_mean, rmse))
    return McReport(label, rows, n_ok + n_failed, n_ok, n_failed, est, se)


def _replicate(args):
    design, fit, r = args
    d = replace(design, seed=design.seed + r)
    data = generate_dataset(d)
    truth = design.truth()
    try:
        res = fit(data)
    except FactorCopError as exc:
        log.info("replication %d failed: %s", r, exc)
        return None
    est = [res.estimates.get(k, math.nan) for k in truth]
    se = [res.se.get(k, math.nan) for k in truth]
    return est, se


def _pool_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=1))


def mc_study(
    design: SimDesign,
    fit: FitRecipe | Callable[[LongitudinalDataset], FitSummary] | None = None,
    N: int | None = None,
    jobs: int = 1,
) -> McReport:
    """Replicate generate -> fit ``N`` times; replication r uses seed + r.

    Results are independent of ``jobs``. Replications raising a package
    error are dropped and counted in ``n_failed``.
    """
    N = design.N if N is None else N
    if N < 2:
        raise DomainError("N >= 2 required")
    fit = fit or recipe_for(design)
    fit_fn = fit.fit if isinstance(fit, FitRecipe) else fit
    out = _pool_map(_replicate, [(design, fit_fn, r) for r in range(N)], jobs)
    ok = [o for o in out if o is not None]
    est = np.array([o[0] for o in ok]) if ok else np.zeros((0, len(design.truth())))
    se = np.array([o[1] for o in ok]) if ok else np.zeros((0, len(design.truth())))
    label = f"{design.kind.value} / {design.model_name} (m = {design.m})"
    return summarize_replications(label, design.truth(), est, se, N - len(ok))


# ------------------------------------------------------- model comparison


@dataclass
class ComparisonRow:
    generator: str
    kind: str
    mean_aic: dict[str, float]
    mean_bic: dict[str, float]
    pci_aic: float
    pci_bic: float
    n_ok: int
    n_failed: int


@dataclass
class ComparisonReport:
    candidates: list[str]
    rows: list[ComparisonRow]

    def row(self, kind: str, generator: str) -> ComparisonRow:
        for r in self.rows:
            if r.kind == kind and r.generator == generator:
                return r
        raise KeyError((kind, generator))

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "generator"] + [f"{c}_{s}" for c in self.candidates for s in ("aic", "bic")]
                   + ["pci_aic", "pci_bic", "n_ok", "n_failed"])
        for r in self.rows:
            vals = [f"{v:.2f}" for c in self.candidates for v in (r.mean_aic[c], r.mean_bic[c])]
            w.writerow([r.kind, r.generator] + vals
                       + [f"{r.pci_aic:.2f}", f"{r.pci_bic:.2f}", r.n_ok, r.n_failed])
        return buf.getvalue()

    def to_text(self) -> str:
        width = 22
        head = f"{'Model':<9}{'Generated':<14}" + "".join(f"{c:>{width}}" for c in self.candidates)
        sub = f"{'':<9}{'Fitted':<14}" + "".join(f"{'AIC':>11}{'BIC':>11}" for _ in self.candidates)
        lines = [head, sub, "-" * len(head)]
        for r in self.rows:
            cells = "".join(f"{r.mean_aic[c]:>11.2f}{r.mean_bic[c]:>11.2f}" for c in self.candidates)
            lines.append(f"{r.kind:<9}{r.generator:<14}{cells}")
            lines.append(f"{'':<9}{'PCI':<14}{r.pci_aic:>11.2f}{r.pci_bic:>11.2f}"
                         f"   (N ok = {r.n_ok}, failed = {r.n_failed})")
        return "\n".join(lines) + "\n"


def _compare_one(args):
    design, candidates, r = args
    data = generate_dataset(replace(design, seed=design.seed + r))
    out = {}
    marginal = None
    try:
        for c in candidates:
            if not c.is_mixed and marginal is None:
                marginal = mg.fit_marginal(data)
            res = c.fit(data, marginal=None if c.is_mixed else marginal)
            out[c.model] = (res.aic, res.bic, res.dim)
    except FactorCopError as exc:
        log.info("comparison replication %d failed: %s", r, exc)
        return None
    return out


def model_comparison_study(
    designs: Sequence[SimDesign],
    candidates: Sequence[FitRecipe],
    N: int | None = None,
    jobs: int = 1,
) -> ComparisonReport:
    """Fit every candidate to data from every generator; PCI is the share of
    replications in which the generator's own class has the smallest AIC
    (BIC). Candidates should not need Godambe SEs, so set ``godambe=False``.
    """
    names = [c.model for c in candidates]
    if len(set(names)) != len(names):
        raise DomainError("candidate model names must be distinct")
    rows = []
    for design in designs:
        n = design.N if N is None else N
        if n < 1:
            raise DomainError("N >= 1 required")
        out = _pool_map(_compare_one, [(design, list(candidates), r) for r in range(n)], jobs)
        ok = [o for o in out if o is not None]
        true = design.model_name
        hits_aic = hits_bic = 0
        for o in ok:
            dims = {k: v[2] for k, v in o.items()}
            hits_aic += select_model({k: v[0] for k, v in o.items()}, dims) == true
            hits_bic += select_model({k: v[1] for k, v in o.items()}, dims) == true
        mean_aic = {c: float(np.mean([o[c][0] for o in ok])) if ok else math.nan for c in names}
        mean_bic = {c: float(np.mean([o[c][1] for o in ok])) if ok else math.nan for c in names}
        n_ok = len(ok)
        rows.append(ComparisonRow(
            true, design.kind.value, mean_aic, mean_bic,
            hits_aic / n_ok if n_ok else math.nan, hits_bic / n_ok if n_ok else math.nan,
            n_ok, n - n_ok))
    return ComparisonReport(names, rows)


def write_report(report, path: str | Path, fmt: str) -> None:
    text = {"json": report.to_json, "csv": report.to_csv, "text": report.to_text}[fmt]()
    Path(path).write_text(text, encoding="utf-8")
