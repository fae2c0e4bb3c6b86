"""Command-line interface: ``factorcop {fit,simulate,mc-study,compare}``.

Every run writes its outputs plus ``manifest.json`` (configuration, seed,
package versions and output checksums) into ``--out``. Exit status is 2 for
data or configuration errors and 3 for convergence failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import factor_model as fm
from . import marginals as mg
from . import simulator as sim
from .dataset import ColumnSchema, ResponseKind, load_csv, summarize, write_csv
from .errors import ConvergenceError, DataError, GodambeError
from .mixed_baseline import MixedSpec, fit_mixed

log = logging.getLogger("factorcop")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3
FORMATS = ("json", "csv", "text")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    jobs: int = 1
    out: str = "factorcop-out"
    format: str = "text"
    response: str | None = None
    K: int | None = None
    factors: int = 1
    copula: str = "gaussian"
    nu: float | None = None
    nu_grid: tuple[int, ...] = fm.DEFAULT_NU_GRID
    quad: str = fm.DEFAULT_QUAD_MODE
    quad_n: int = fm.DEFAULT_QUAD_N
    data: str | None = None
    columns: dict = field(default_factory=dict)
    recode: int = 0
    time_scale: float = 1.0
    random_effects: str | None = None
    slope_scale: float = 1.0
    preset: str | None = None
    m: int | None = None
    N: int | None = None
    generators: tuple[str, ...] = ()
    candidates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.command == "fit" and self.copula == "gaussian" and self.nu is not None:
            raise DataError("--nu only applies to --copula t")


def _nu_grid(text: str) -> tuple[int, ...]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    if a < 2 or b < a:
        raise argparse.ArgumentTypeError("need 2 <= a <= b")
    return tuple(range(a, b + 1))


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factorcop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"factorcop {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", default="factorcop-out", help="output directory")
    common.add_argument("--format", choices=FORMATS, default="text", help="format printed to stdout")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--factors", type=int, choices=(1, 2), default=1)
    model.add_argument("--copula", choices=("gaussian", "t"), default="gaussian")
    model.add_argument("--nu", type=float, default=None, help="fixed nu (t copula); default profiles --nu-grid")
    model.add_argument("--nu-grid", type=_nu_grid, default=fm.DEFAULT_NU_GRID, metavar="a:b")
    model.add_argument("--quad", choices=fm.QUAD_MODES, default=fm.DEFAULT_QUAD_MODE)
    model.add_argument("--quad-n", type=int, default=fm.DEFAULT_QUAD_N)

    f = sub.add_parser("fit", parents=[common, model], help="two-stage fit of a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--response", choices=[k.value for k in ResponseKind], required=True)
    f.add_argument("--K", type=int, default=None, help="number of ordinal categories")
    f.add_argument("--col-id", default="id")
    f.add_argument("--col-time", default="time")
    f.add_argument("--col-y", default="y")
    f.add_argument("--col-covariates", type=_csv_list, default=None,
                   help="comma-separated covariate columns (default: all others)")
    f.add_argument("--recode", type=int, default=0, help="added to every category code")
    f.add_argument("--time-scale", type=float, default=1.0)
    f.add_argument("--random-effects", choices=("RI", "RIS"), default=None,
                   help="fit a random-effects baseline instead of a factor copula")
    f.add_argument("--slope-scale", type=float, default=1.0, help="slope column is scale * time")

    s = sub.add_parser("simulate", parents=[common], help="write one simulated dataset")
    s.add_argument("--preset", required=True, choices=sim.PRESETS)
    s.add_argument("--m", type=int, default=None)

    mc = sub.add_parser("mc-study", parents=[common, model], help="Monte Carlo estimation study")
    mc.add_argument("--preset", required=True, choices=sim.PRESETS)
    mc.add_argument("--m", type=int, default=None)
    mc.add_argument("--N", type=int, default=None)

    c = sub.add_parser("compare", parents=[common], help="model-comparison (PCI) study")
    c.add_argument("--response", choices=[k.value for k in ResponseKind], required=True)
    c.add_argument("--generators", type=_csv_list, default=("ri", "1f-gauss", "1f-t"))
    c.add_argument("--candidates", type=_csv_list, default=("RI", "gaussian-1f", "t-1f"))
    c.add_argument("--nu", type=float, default=4.0, help="fixed nu of t candidates")
    c.add_argument("--quad", choices=fm.QUAD_MODES, default=fm.DEFAULT_QUAD_MODE)
    c.add_argument("--quad-n", type=int, default=fm.DEFAULT_QUAD_N)
    c.add_argument("--m", type=int, default=None)
    c.add_argument("--N", type=int, default=None)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cols = {}
    if ns.command == "fit":
        cols = {"id": ns.col_id, "time": ns.col_time, "y": ns.col_y,
                "covariates": list(ns.col_covariates) if ns.col_covariates else None}
    g = vars(ns)
    return RunConfig(
        command=ns.command, seed=ns.seed, jobs=ns.jobs, out=ns.out, format=ns.format,
        response=g.get("response"), K=g.get("K"), factors=g.get("factors", 1),
        copula=g.get("copula", "t" if ns.command == "compare" else "gaussian"),
        nu=g.get("nu"), nu_grid=tuple(g.get("nu_grid", fm.DEFAULT_NU_GRID)),
        quad=g.get("quad", fm.DEFAULT_QUAD_MODE), quad_n=g.get("quad_n", fm.DEFAULT_QUAD_N),
        data=g.get("data"), columns=cols, recode=g.get("recode", 0),
        time_scale=g.get("time_scale", 1.0), random_effects=g.get("random_effects"),
        slope_scale=g.get("slope_scale", 1.0), preset=g.get("preset"), m=g.get("m"),
        N=g.get("N"), generators=tuple(g.get("generators", ())),
        candidates=tuple(g.get("candidates", ())),
    )


# ------------------------------------------------------------------ runs


def _write(out: Path, name: str, text: str, written: list[str]) -> None:
    (out / name).write_text(text, encoding="utf-8")
    written.append(name)


def _manifest(cfg: RunConfig, out: Path, written: list[str], extra: dict | None = None) -> None:
    files = {n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in sorted(written)}
    doc = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "versions": {"factorcop": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": files,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=str), encoding="utf-8")


def _fit_table(rows: list[tuple[str, float, float]], footer: list[tuple[str, float]], title: str) -> str:
    lines = [title, f"{'Parameter':<22}{'Estimate':>12}{'SE':>12}", "-" * 46]
    for name, est, se in rows:
        se_txt = f"{se:>12.4f}" if se is not None and np.isfinite(se) else f"{'-':>12}"
        lines.append(f"{name:<22}{est:>12.4f}{se_txt}")
    lines.append("-" * 46)
    for name, val in footer:
        lines.append(f"{name:<22}{val:>12.2f}")
    return "\n".join(lines) + "\n"


def run_fit(cfg: RunConfig, out: Path) -> str:
    schema = ColumnSchema(cfg.columns["id"], cfg.columns["time"], cfg.columns["y"],
                          tuple(cfg.columns["covariates"]) if cfg.columns["covariates"] else None)
    data = load_csv(cfg.data, cfg.response, schema, cfg.K, cfg.recode, cfg.time_scale)
    written: list[str] = []
    summary = summarize(data).as_dict()
    if cfg.random_effects:
        spec = MixedSpec(1 if cfg.random_effects == "RI" else 2, cfg.slope_scale, cfg.quad_n)
        res = fit_mixed(data, spec)
        doc = {"data": summary, "mixed": res.to_dict()}
        rows = [(n, v, s) for (n, v), s in zip(res.estimates().items(), res.se)]
        footer = [("loglik", res.loglik), ("AIC", res.aic), ("BIC", res.bic)]
        title = f"{spec.name} model, {data.kind.value} response, m = {data.m}"
        csv_rows = rows
    else:
        family = "gaussian" if cfg.copula == "gaussian" else "student_t"
        spec = fm.FactorCopulaSpec(cfg.factors, family, cfg.nu)
        quad = fm.make_quadrature(cfg.quad_n, cfg.quad)
        res = fm.fit_two_stage(data, spec, quad, cfg.nu_grid)
        f = res.factor
        doc = {"data": summary, "marginal": res.marginal.to_dict(), "factor": f.to_dict(),
               "godambe": res.godambe.to_dict() if res.godambe else None}
        se = res.standard_errors()
        rows = [(n, v, se.get(n)) for n, v in res.estimates().items()]
        title = f"{spec.name} copula ({data.kind.value} margins), m = {data.m}"
        if f.nu is not None:
            title += f", nu = {f.nu:g}"
        footer = [("loglik", f.loglik), ("AIC", f.aic), ("BIC", f.bic)]
        csv_rows = rows
    text = _fit_table(rows, footer, title)
    js = json.dumps(doc, indent=2, default=float)
    csv_text = "parameter,estimate,se\n" + "".join(
        f"{n},{v:.10g},{'' if s is None else f'{s:.10g}'}\n" for n, v, s in csv_rows)
    _write(out, "fit.json", js, written)
    _write(out, "summary.txt", text, written)
    _write(out, "estimates.csv", csv_text, written)
    _manifest(cfg, out, written)
    return {"json": js, "csv": csv_text, "text": text}[cfg.format]


def _design(cfg: RunConfig, name: str) -> sim.SimDesign:
    over = {"seed": cfg.seed}
    if cfg.m is not None:
        over["m"] = cfg.m
    if cfg.N is not None:
        over["N"] = cfg.N
    return sim.preset(name, **over)


def run_simulate(cfg: RunConfig, out: Path) -> str:
    design = _design(cfg, cfg.preset)
    data = sim.generate_dataset(design)
    written: list[str] = []
    write_csv(data, out / "data.csv")
    written.append("data.csv")
    _manifest(cfg, out, written, {"design": design.to_dict()})
    s = summarize(data).as_dict()
    return json.dumps(s, indent=2) if cfg.format == "json" else (
        f"wrote {out / 'data.csv'}: m = {s['m']}, observations = {s['n_obs']}, "
        f"mean n_i = {s['mean_n']:.2f}\n")


def run_mc_study(cfg: RunConfig, out: Path) -> str:
    design = _design(cfg, cfg.preset)
    recipe_kw = dict(quad_mode=cfg.quad, quad_n=cfg.quad_n, nu_grid=cfg.nu_grid)
    if cfg.nu is not None:
        recipe_kw["nu"] = cfg.nu
    recipe = sim.recipe_for(design, **recipe_kw)
    report = sim.mc_study(design, recipe, cfg.N, cfg.jobs)
    written: list[str] = []
    _write(out, "report.csv", report.to_csv(), written)
    _write(out, "report.txt", report.to_text(), written)
    _write(out, "report.json", report.to_json(), written)
    _manifest(cfg, out, written, {"design": design.to_dict(), "recipe": asdict(recipe)})
    return {"json": report.to_json(), "csv": report.to_csv(), "text": report.to_text()}[cfg.format]


def run_compare(cfg: RunConfig, out: Path) -> str:
    designs = [_design(cfg, f"{cfg.response}-{g}") for g in cfg.generators]
    candidates = []
    for c in cfg.candidates:
        nu = cfg.nu if c.startswith("t-") else None
        candidates.append(sim.FitRecipe(c, nu=nu, quad_mode=cfg.quad, quad_n=cfg.quad_n,
                                        godambe=False, slope_scale=0.1))
    report = sim.model_comparison_study(designs, candidates, cfg.N, cfg.jobs)
    written: list[str] = []
    _write(out, "comparison.csv", report.to_csv(), written)
    _write(out, "comparison.txt", report.to_text(), written)
    _write(out, "comparison.json", report.to_json(), written)
    _manifest(cfg, out, written, {"designs": [d.to_dict() for d in designs],
                                  "candidates": [asdict(c) for c in candidates]})
    return {"json": report.to_json(), "csv": report.to_csv(), "text": report.to_text()}[cfg.format]


RUNNERS = {"fit": run_fit, "simulate": run_simulate, "mc-study": run_mc_study,
           "compare": run_compare}


def _setup_logging() -> None:
    level = os.environ.get("FACTORCOP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    ns = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(ns)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        text = RUNNERS[cfg.command](cfg, out)
    except DataError as exc:
        print(f"factorcop: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, GodambeError) as exc:
        stage = getattr(exc, "stage", "") or "standard errors"
        print(f"factorcop: convergence error in stage '{stage}': {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
