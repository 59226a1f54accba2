"""Command-line entry point: ``btm {fit,project,validate,simulate,summarize}``.

Settings come from built-in defaults, then an optional YAML/JSON config
file, then command-line flags (flags win). The resolved configuration is
written to ``config.yaml`` in the output directory; passing it back with
``--config`` reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 convergence
failure (any R-hat above 1.05 without ``--allow-nonconverged``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (HierarchyIndex, read_hierarchy, read_observations, read_tfr,
                   write_observations, write_tfr)
from .errors import BTMError, ConfigError, DataError, SplitError
from .io import atomic_write_text, fmt, write_csv, write_draws_csv, write_json
from .mcpr import McprModel
from .sampler import SamplerConfig, nuts_sample, summarize_draws
from .tfr import TfrModel, tfr_project
from .transition import constrain_mcpr
from .validation import (HoldoutPlan, generate_synthetic, generate_synthetic_tfr,
                         make_hierarchy, reference_parameters, run_holdout, write_reports)

logger = logging.getLogger("btm")

COMMANDS = ("fit", "project", "validate", "simulate", "summarize")
MODELS = ("mcpr_bspline", "mcpr_approx_logistic", "tfr_bspline")
QUANTILES = (0.025, 0.10, 0.25, 0.50, 0.75, 0.90, 0.975)
QCOLS = tuple(f"q{100 * q:g}" for q in QUANTILES)
GRID_POINTS = 200
RHAT_MAX = 1.05

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4

DEFAULTS = {
    "model": "mcpr_bspline",
    "spline": {"K": 5, "d": 2},
    "grid": {"start": 1970, "end": 2030, "reference_year": 1990},
    "sampler": SamplerConfig().to_dict(),
    "paths": {"data": None, "hierarchy": None, "out": "btm-out"},
    "holdout": {"kind": "random_20pct", "cutoff_year": 2010, "repetitions": 5, "seed": 0},
    "projection": {"end_year": 2095},
    "simulate": {"regions": 2, "subregions_per_region": 2, "countries_per_subregion": 3,
                 "n_obs": [4, 20], "noise": True, "truth": "reference",
                 "obs_years": [1975, 2020], "tfr_countries": 4},
    "allow_nonconverged": False,
}
TFR_SPLINE = {"K": 7, "d": 2}


class ConvergenceFailure(BTMError):
    pass


# --- configuration ----------------------------------------------------------------

def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where}{key!r} must be a mapping")
            if key == "sampler":
                bad = set(value) - set(base[key]) - {"preset"}
                if bad:
                    raise ConfigError(f"unknown sampler keys {sorted(bad)}")
                out[key] = {**out[key], **value}
            else:
                out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        payload = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    payload.pop("command", None)
    return payload


def _flag_overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if args.model is not None:
        o["model"] = args.model
    put("paths", "data", args.data)
    put("paths", "hierarchy", args.hierarchy)
    put("paths", "out", args.out)
    put("spline", "K", args.knots)
    put("spline", "d", args.degree)
    put("sampler", "chains", args.chains)
    put("sampler", "warmup", args.warmup)
    put("sampler", "samples", args.samples)
    put("sampler", "adapt_delta", args.adapt_delta)
    put("sampler", "max_treedepth", args.max_treedepth)
    put("sampler", "seed", args.seed)
    put("sampler", "n_jobs", args.jobs)
    if args.holdout is not None:
        put("holdout", "kind", {"random": "random_20pct", "cutoff": "after_cutoff"}[args.holdout])
    put("holdout", "cutoff_year", args.cutoff_year)
    put("holdout", "repetitions", args.repetitions)
    if args.seed is not None:
        put("holdout", "seed", args.seed)
    put("projection", "end_year", args.end_year)
    if args.allow_nonconverged:
        o["allow_nonconverged"] = True
    return o


def resolve_config(args) -> dict:
    """Defaults <- config file <- flags, with sampler presets expanded."""
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(args)
    model = flags.get("model", file_cfg.get("model", DEFAULTS["model"]))
    base = copy.deepcopy(DEFAULTS)
    if model == "tfr_bspline":
        base["spline"] = dict(TFR_SPLINE)
    cfg = _merge(_merge(base, file_cfg), flags)
    if cfg["model"] not in MODELS:
        raise ConfigError(f"unknown model {cfg['model']!r}; choose from {MODELS}")
    preset = cfg["sampler"].pop("preset", None)
    if preset:
        explicit = {**file_cfg.get("sampler", {}), **flags.get("sampler", {})}
        explicit.pop("preset", None)
        cfg["sampler"] = SamplerConfig.preset(preset, **explicit).to_dict()
    sampler_config(cfg)
    return cfg


def sampler_config(cfg) -> SamplerConfig:
    try:
        return SamplerConfig(**cfg["sampler"])
    except TypeError as exc:
        raise ConfigError(f"bad sampler settings: {exc}") from None


def out_dir(cfg) -> Path:
    out = Path(cfg["paths"]["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _require(cfg, key) -> Path:
    value = cfg["paths"][key]
    if value is None:
        raise ConfigError(f"missing required path: --{key}")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{key} file {path} does not exist")
    return path


def write_config(cfg, command: str) -> None:
    payload = {"command": command, **cfg}
    atomic_write_text(out_dir(cfg) / "config.yaml", yaml.safe_dump(payload, sort_keys=True))


# --- model construction -----------------------------------------------------------

def load_mcpr(cfg):
    obs, hier = read_observations(_require(cfg, "data"))
    if cfg["paths"]["hierarchy"]:
        hier = read_hierarchy(_require(cfg, "hierarchy"))
    return obs, hier


def mcpr_model(cfg, hierarchy: HierarchyIndex, obs, sources=None) -> McprModel:
    g = cfg["grid"]
    transition = "bspline" if cfg["model"] == "mcpr_bspline" else "approx_logistic"
    return McprModel(hierarchy, obs, K=cfg["spline"]["K"], degree=cfg["spline"]["d"],
                     years=(g["start"], g["end"]), ref_year=g["reference_year"],
                     transition=transition, sources=sources)


def build_model(cfg):
    if cfg["model"] == "tfr_bspline":
        series = read_tfr(_require(cfg, "data"))
        return TfrModel(series, K=cfg["spline"]["K"], degree=cfg["spline"]["d"])
    obs, hier = load_mcpr(cfg)
    return mcpr_model(cfg, hier, obs)


# --- output tables ------------------------------------------------------------------

def _qrow(values, axis=0):
    return np.quantile(values, QUANTILES, axis=axis)


def trajectory_rows(model: McprModel, eta):
    """Quantiles of eta (n, C, T) per country-year."""
    q = _qrow(eta)
    rows = []
    for c, code in enumerate(model.hierarchy.countries):
        for t, year in enumerate(model.years):
            rows.append({"country": code, "year": int(year),
                         **{col: fmt(q[k, c, t]) for k, col in enumerate(QCOLS)}})
    return rows


def _curve_rows(level, names, curves, grid):
    # curves: (n, units, G)
    q = _qrow(curves)
    rows = []
    for u, name in enumerate(names):
        for g, x in enumerate(grid):
            rows.append({"level": level, "unit": name, "eta": fmt(x),
                         **{col: fmt(q[k, u, g]) for k, col in enumerate(QCOLS)}})
    return rows


def mcpr_transition_rows(model: McprModel, d: dict):
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    h = model.hierarchy
    n = d["upper"].shape[0]
    world = np.broadcast_to(d["world_upper"][:, None], (n, h.S))
    rows = _curve_rows("country", h.countries,
                       model.transition_curve(d["coef"], d["upper"], grid), grid)
    rows += _curve_rows("subregion", h.subregions,
                        model.transition_curve(d["coef_s"], world, grid), grid)
    world_r = np.broadcast_to(d["world_upper"][:, None], (n, h.R))
    rows += _curve_rows("region", h.regions,
                        model.transition_curve(d["coef_r"], world_r, grid), grid)
    return rows


def tfr_transition_rows(model: TfrModel, d: dict):
    rows = []
    for c, code in enumerate(model.countries):
        grid = np.linspace(1.0, model.omega[c], GRID_POINTS)
        curves = model.transition_curve(d["coef"][:, c, :], np.full(d["coef"].shape[0], model.omega[c]), grid)
        rows += _curve_rows("country", [code], curves[:, None, :], grid)
    return rows


def hyper_draws(model, res) -> dict:
    """Constrained hyperparameters, each shaped (chains, n)."""
    d = model.derived(res.draws)
    out = {"tau": d["tau"]}
    if isinstance(model, TfrModel):
        for j in range(model.P):
            out[f"beta_w[{j}]"] = d["beta_w"][..., j]
            out[f"sigma_beta_c[{j}]"] = d["sigma_beta_c"][..., j]
        return out
    out["rho"] = d["rho"]
    out["world_upper"] = d["world_upper"]
    for k, src in enumerate(model.sources):
        out[f"sigma_d[{src}]"] = d["sigma_d"][..., k]
    if model.transition == "bspline":
        coef_w = constrain_mcpr(d["beta_w"], model.ks)
        for j in range(model.P):
            out[f"beta_w[{j}]"] = d["beta_w"][..., j]
            out[f"coef_w[{j}]"] = coef_w[..., j]
    else:
        out["omega_w"] = d["omega_w"]
    return out


def hyper_rows(hyper: dict):
    rows = []
    names = list(hyper)
    arr = np.stack([hyper[n] for n in names], axis=-1)
    rhat, ess = summarize_draws(arr) if arr.shape[0] > 1 else (np.full(len(names), np.nan),) * 2
    flat = arr.reshape(-1, len(names))
    q = np.quantile(flat, [0.025, 0.5, 0.975], axis=0)
    for i, n in enumerate(names):
        rows.append({"name": n, "mean": fmt(flat[:, i].mean()), "sd": fmt(flat[:, i].std(ddof=1)),
                     "q2.5": fmt(q[0, i]), "q50": fmt(q[1, i]), "q97.5": fmt(q[2, i]),
                     "rhat": fmt(rhat[i]), "ess_bulk": fmt(ess[i])})
    return rows


HYPER_COLUMNS = ("name", "mean", "sd", "q2.5", "q50", "q97.5", "rhat", "ess_bulk")


def read_draws(path, names) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no draws at {path}; run `btm fit` first")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[2:] != list(names):
            raise DataError(f"{path}: parameter columns do not match the configured model")
        rows = [(int(r[0]), int(r[1]), [float(x) for x in r[2:]]) for r in reader]
    chains = max(r[0] for r in rows) + 1
    n = max(r[1] for r in rows) + 1
    out = np.empty((chains, n, len(names)))
    for c, i, v in rows:
        out[c, i] = v
    return out


# --- commands -----------------------------------------------------------------------

def cmd_fit(cfg) -> int:
    model = build_model(cfg)
    out = out_dir(cfg)
    scfg = sampler_config(cfg)
    names = model.param_names()
    logger.info("fitting %s: %d parameters", cfg["model"], model.dim)
    res = nuts_sample(model, model.dim, scfg, names=names)
    write_config(cfg, "fit")
    write_draws_csv(out / "draws.csv", res.draws, names)
    # derive from the stored (rounded) draws so `project` reproduces these files
    flat = read_draws(out / "draws.csv", names).reshape(-1, model.dim)
    d = model.derived(flat)
    if isinstance(model, TfrModel):
        write_csv(out / "transitions.csv", ("level", "unit", "eta", *QCOLS),
                  tfr_transition_rows(model, d))
        write_projection(cfg, model, flat, scfg.seed)
    else:
        write_csv(out / "trajectories.csv", ("country", "year", *QCOLS),
                  trajectory_rows(model, d["eta"]))
        write_csv(out / "transitions.csv", ("level", "unit", "eta", *QCOLS),
                  mcpr_transition_rows(model, d))
    write_csv(out / "hyperparameters.csv", HYPER_COLUMNS, hyper_rows(hyper_draws(model, res)))
    diag = res.diagnostics.to_dict()
    diag["elapsed_seconds"] = res.elapsed
    if "clamped" in d:
        diag["clamped_steps"] = int(np.sum(d["clamped"]))
    diag["converged"] = bool(res.diagnostics.max_rhat <= RHAT_MAX)
    write_json(out / "diagnostics.json", diag)
    return check_convergence(cfg, res.diagnostics.max_rhat)


def check_convergence(cfg, max_rhat: float) -> int:
    if not max_rhat <= RHAT_MAX:  # nan means chains never moved
        msg = f"max R-hat {max_rhat:.3f} exceeds {RHAT_MAX}"
        if cfg["allow_nonconverged"]:
            logger.warning("%s (continuing: --allow-nonconverged)", msg)
            return EXIT_OK
        raise ConvergenceFailure(msg)
    return EXIT_OK


def write_projection(cfg, model: TfrModel, draws, seed) -> None:
    proj = tfr_project(model, draws, end_year=cfg["projection"]["end_year"],
                       rng=np.random.default_rng(np.random.SeedSequence([seed, 7])))
    rows = []
    for code, (years, paths) in proj.items():
        q = _qrow(paths)
        for t, year in enumerate(years):
            rows.append({"country": code, "period_start": int(year),
                         **{col: fmt(q[k, t]) for k, col in enumerate(QCOLS)}})
    write_csv(out_dir(cfg) / "projections.csv", ("country", "period_start", *QCOLS), rows)


def cmd_project(cfg) -> int:
    model = build_model(cfg)
    out = out_dir(cfg)
    draws = read_draws(out / "draws.csv", model.param_names())
    flat = draws.reshape(-1, model.dim)
    if isinstance(model, TfrModel):
        write_projection(cfg, model, flat, cfg["sampler"]["seed"])
    else:
        d = model.derived(flat)
        write_csv(out / "trajectories.csv", ("country", "year", *QCOLS),
                  trajectory_rows(model, d["eta"]))
    return EXIT_OK


def cmd_summarize(cfg) -> int:
    model = build_model(cfg)
    out = out_dir(cfg)
    draws = read_draws(out / "draws.csv", model.param_names())

    class _Res:
        pass

    res = _Res()
    res.draws = draws
    rows = hyper_rows(hyper_draws(model, res))
    write_csv(out / "hyperparameters.csv", HYPER_COLUMNS, rows)
    rhat, ess = summarize_draws(draws) if draws.shape[0] > 1 else (np.array([np.nan]),) * 2
    summary = {"draws": list(draws.shape), "max_rhat": float(np.nanmax(rhat)),
               "min_ess_bulk": float(np.nanmin(ess))}
    write_json(out / "summary.json", summary)
    for r in rows:
        print(f"{r['name']:>24}  median {r['q50']:>12}  95% [{r['q2.5']}, {r['q97.5']}]  "
              f"R-hat {r['rhat']}")
    return EXIT_OK


def cmd_validate(cfg) -> int:
    if cfg["model"] == "tfr_bspline":
        raise ConfigError("hold-out validation is defined for the mCPR models only")
    obs, hier = load_mcpr(cfg)
    hp = cfg["holdout"]
    plan = HoldoutPlan(hp["kind"], hp["cutoff_year"], hp["repetitions"], hp["seed"])
    plan.check_grid(np.arange(cfg["grid"]["start"], cfg["grid"]["end"] + 1))
    sources = obs.sources
    report, runs = run_holdout(lambda train: mcpr_model(cfg, hier, train, sources=sources),
                               obs, plan, sampler_config(cfg), label=cfg["model"])
    out = out_dir(cfg)
    write_config(cfg, "validate")
    table1 = [{k: v for k, v in r.to_row().items()
               if not k.startswith("pit_")} for r in [report, *runs]]
    table2 = [{k: v for k, v in r.to_row().items()
               if k in ("label", "n_eligible") or k.startswith("pit_")} for r in [report, *runs]]
    for name, rows in (("validation_table1.csv", table1), ("validation_table2.csv", table2)):
        cols = list(rows[0])
        write_csv(out / name, cols,
                  [{k: (fmt(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows])
    write_reports(out / "validation", [report, *runs])
    if not report.applicable:
        logger.warning("no eligible held-out observations: report not applicable")
    return EXIT_OK


def cmd_simulate(cfg) -> int:
    out = out_dir(cfg)
    seed = cfg["sampler"]["seed"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    sim = cfg["simulate"]
    if cfg["model"] == "tfr_bspline":
        series, truth = generate_synthetic_tfr(sim["tfr_countries"], rng, K=cfg["spline"]["K"],
                                               degree=cfg["spline"]["d"])
        write_tfr(out / "data.csv", series)
        write_json(out / "truth.json", truth)
        write_config(cfg, "simulate")
        return EXIT_OK
    if cfg["paths"]["hierarchy"]:
        hier = read_hierarchy(_require(cfg, "hierarchy"))
    else:
        hier = make_hierarchy(sim["regions"], sim["subregions_per_region"],
                              sim["countries_per_subregion"])
    lo, hi = sim["n_obs"]
    if lo < 1 or hi < lo:
        raise ConfigError("simulate.n_obs must be [lo, hi] with 1 <= lo <= hi")
    skeleton = mcpr_model(cfg, hier, None, sources=["DHS", "MICS", "National"])
    if sim["truth"] == "reference":
        q = reference_parameters(skeleton, rng)
    elif sim["truth"] == "prior":
        q = skeleton.sample_prior(rng)
    else:
        raise ConfigError("simulate.truth must be 'reference' or 'prior'")
    obs, truth = generate_synthetic(skeleton, rng, q_true=q, n_obs=(lo, hi),
                                    year_range=tuple(sim["obs_years"]),
                                    zero_noise=not sim["noise"])
    write_observations(out / "data.csv", obs, hier)
    rows = []
    for c, code in enumerate(hier.countries):
        for t, year in enumerate(skeleton.years):
            rows.append({"country": code, "year": int(year), "eta": fmt(truth["eta"][c, t]),
                         "upper": fmt(truth["upper"][c])})
    write_csv(out / "truth.csv", ("country", "year", "eta", "upper"), rows)
    write_csv(out / "truth_parameters.csv", ("name", "value"),
              [{"name": n, "value": fmt(v)} for n, v in zip(skeleton.param_names(), q)])
    write_config(cfg, "simulate")
    return EXIT_OK


HANDLERS = {"fit": cmd_fit, "project": cmd_project, "validate": cmd_validate,
            "simulate": cmd_simulate, "summarize": cmd_summarize}


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btm", description="B-spline transition models")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--data", help="observations CSV")
    p.add_argument("--hierarchy", help="country/subregion/region CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--knots", type=int, help="number of knots K")
    p.add_argument("--degree", type=int, help="spline degree d")
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--adapt-delta", type=float)
    p.add_argument("--max-treedepth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallel chain processes")
    p.add_argument("--holdout", choices=("random", "cutoff"))
    p.add_argument("--cutoff-year", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--end-year", type=int, help="last TFR projection period")
    p.add_argument("--allow-nonconverged", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"btm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SplitError) as exc:
        print(f"btm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceFailure as exc:
        print(f"btm: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
