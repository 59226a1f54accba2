"""Out-of-sample model checks, synthetic data, and simulation-based calibration.

Hold-out exercises split the observations, refit on the training part and
score posterior predictive draws for the held-out points. Quantiles of
predictive draws use linear interpolation between order statistics. In the
PIT table an observation strictly below a quantile counts as "below" and one
equal to it counts as "above", so the two 50% entries always sum to 100.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import multiprocessing as mp

import numpy as np
from scipy import stats

from .data import HierarchyIndex, Observations, TfrSeries
from .errors import ConfigError, DataError, SplitError
from .io import fmt, write_csv, write_json
from .mcpr import McprModel
from .sampler import SamplerConfig, nuts_sample
from .spline import build_knots_tfr
from .tfr import PERIOD, project_step
from .transition import constrain_tfr, f_bspline_vec

logger = logging.getLogger(__name__)

HOLDOUT_KINDS = ("random_20pct", "after_cutoff")
PIT_BELOW = (5, 10, 25, 50)
PIT_ABOVE = (50, 75, 90, 95)
REPORT_COLUMNS = ("label", "n_eligible", "pct_below", "pct_included", "pct_above",
                  "ci_width_x100", "me_x100", "mae_x100",
                  *(f"pit_below_{q}" for q in PIT_BELOW),
                  *(f"pit_above_{q}" for q in PIT_ABOVE))


# --- splitting --------------------------------------------------------------------

@dataclass(frozen=True)
class HoldoutPlan:
    kind: str
    cutoff_year: int | None = None
    repetitions: int = 5
    seed: int = 0
    fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in HOLDOUT_KINDS:
            raise ConfigError(f"unknown hold-out kind {self.kind!r}")
        if self.kind == "after_cutoff" and self.cutoff_year is None:
            raise ConfigError("after_cutoff needs a cutoff year")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("hold-out fraction must lie in (0, 1)")

    @property
    def n_runs(self) -> int:
        return self.repetitions if self.kind == "random_20pct" else 1

    def check_grid(self, years) -> None:
        if self.kind == "after_cutoff" and self.cutoff_year not in set(np.asarray(years).tolist()):
            raise ConfigError(f"cutoff year {self.cutoff_year} is not on the time grid")


@dataclass
class Split:
    """Index arrays into the original observations."""

    train: np.ndarray
    validation: np.ndarray
    error: np.ndarray


def split(obs: Observations, plan: HoldoutPlan, repetition: int = 0) -> Split:
    n = len(obs)
    if n == 0:
        raise SplitError("cannot split an empty dataset")
    if plan.kind == "random_20pct":
        rng = np.random.default_rng(np.random.SeedSequence([plan.seed, repetition]))
        n_out = int(np.floor(plan.fraction * n + 0.5))
        held = np.sort(rng.permutation(n)[:n_out])
        mask = np.zeros(n, dtype=bool)
        mask[held] = True
        train = np.flatnonzero(~mask)
        if train.size == 0:
            raise SplitError("hold-out left no training observations")
        kept = set(obs.country[train].tolist())
        error = np.array([i for i in held if obs.country[i] in kept], dtype=int)
        return Split(train, held, error)

    L = plan.cutoff_year
    before = obs.year < L
    train = np.flatnonzero(before)
    held = np.flatnonzero(~before)
    if train.size == 0:
        raise SplitError(f"no observations before the cutoff {L}")
    kept = set(obs.country[train].tolist())
    latest = {}
    for i in held:
        c = obs.country[i]
        if c not in kept:
            continue
        # ties on year resolve to the later row
        if c not in latest or obs.year[i] >= obs.year[latest[c]]:
            latest[c] = i
    error = np.array(sorted(latest.values()), dtype=int)
    return Split(train, held, error)


# --- predictive draws and metrics ---------------------------------------------------

def truncnorm_draws(mu, sd, rng, lower=0.0, upper=1.0):
    """Normal draws truncated to [lower, upper]; ``sd == 0`` returns ``mu``."""
    mu, sd = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(sd, dtype=float))
    out = np.array(mu, dtype=float)
    pos = sd > 0.0
    if np.any(pos):
        a = (lower - mu[pos]) / sd[pos]
        b = (upper - mu[pos]) / sd[pos]
        out[pos] = stats.truncnorm.rvs(a, b, loc=mu[pos], scale=sd[pos], random_state=rng)
    return out


def posterior_predictive(model: McprModel, eta, sigma_d, obs: Observations, rng):
    """Predictive draws (n_kept, n_draws) for held-out ``obs``.

    ``eta`` is (n_draws, C, T) and ``sigma_d`` (n_draws, D). Observations for
    countries or sources the model does not know are skipped with a warning;
    the boolean mask of kept rows is returned alongside.
    """
    rng = np.random.default_rng(rng)
    cidx = {c: i for i, c in enumerate(model.hierarchy.countries)}
    sidx = {s: i for i, s in enumerate(model.sources)}
    keep = np.array([c in cidx and s in sidx for c, s in zip(obs.country, obs.source_type)],
                    dtype=bool)
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} held-out observations the model cannot "
                      "predict (unknown country or source)")
    c = np.array([cidx[x] for x in obs.country[keep]], dtype=int)
    d = np.array([sidx[x] for x in obs.source_type[keep]], dtype=int)
    t = obs.year[keep] - model.years[0]
    mu = eta[:, c, t].T
    sd = np.sqrt(obs.sampling_sd[keep][:, None] ** 2 + sigma_d[:, d].T ** 2)
    return truncnorm_draws(mu, sd, rng), keep


@dataclass
class ValidationReport:
    n_eligible: int
    pct_below: float = float("nan")
    pct_included: float = float("nan")
    pct_above: float = float("nan")
    ci_width: float = float("nan")
    me: float = float("nan")
    mae: float = float("nan")
    pit_below: dict = field(default_factory=dict)
    pit_above: dict = field(default_factory=dict)
    label: str = ""

    @property
    def applicable(self) -> bool:
        return self.n_eligible > 0

    def to_row(self) -> dict:
        row = {"label": self.label, "n_eligible": self.n_eligible,
               "pct_below": self.pct_below, "pct_included": self.pct_included,
               "pct_above": self.pct_above, "ci_width_x100": 100.0 * self.ci_width,
               "me_x100": 100.0 * self.me, "mae_x100": 100.0 * self.mae}
        for q in PIT_BELOW:
            row[f"pit_below_{q}"] = self.pit_below.get(q, float("nan"))
        for q in PIT_ABOVE:
            row[f"pit_above_{q}"] = self.pit_above.get(q, float("nan"))
        return row

    def to_dict(self) -> dict:
        out = asdict(self)
        out["applicable"] = self.applicable
        out["pit_below"] = {str(k): v for k, v in self.pit_below.items()}
        out["pit_above"] = {str(k): v for k, v in self.pit_above.items()}
        return out


def summarize(pred, y, label: str = "") -> ValidationReport:
    """Coverage, error and PIT summaries of predictive draws (n_obs, n_draws)."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return ValidationReport(0, label=label)
    if pred.shape[0] != y.size:
        raise DataError("predictive draws and observations do not line up")
    lo, med, hi = np.quantile(pred, [0.025, 0.5, 0.975], axis=1)
    below = y < lo
    above = y > hi
    err = med - y
    rep = ValidationReport(
        n_eligible=int(y.size),
        pct_below=100.0 * below.mean(),
        pct_included=100.0 * (~below & ~above).mean(),
        pct_above=100.0 * above.mean(),
        ci_width=float(np.median(hi - lo)),
        me=float(np.median(err)),
        mae=float(np.median(np.abs(err))),
        label=label,
    )
    qs = np.quantile(pred, [q / 100.0 for q in PIT_BELOW + PIT_ABOVE], axis=1)
    for k, q in enumerate(PIT_BELOW):
        rep.pit_below[q] = 100.0 * float(np.mean(y < qs[k]))
    for k, q in enumerate(PIT_ABOVE):
        rep.pit_above[q] = 100.0 * float(np.mean(y >= qs[len(PIT_BELOW) + k]))
    return rep


def average_reports(reports, label: str = "") -> ValidationReport:
    """Field-wise arithmetic mean over applicable reports."""
    reports = [r for r in reports if r.applicable]
    if not reports:
        return ValidationReport(0, label=label)

    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    return ValidationReport(
        n_eligible=int(round(np.mean([r.n_eligible for r in reports]))),
        pct_below=mean("pct_below"), pct_included=mean("pct_included"),
        pct_above=mean("pct_above"), ci_width=mean("ci_width"),
        me=mean("me"), mae=mean("mae"),
        pit_below={q: float(np.mean([r.pit_below[q] for r in reports])) for q in PIT_BELOW},
        pit_above={q: float(np.mean([r.pit_above[q] for r in reports])) for q in PIT_ABOVE},
        label=label,
    )


def write_reports(prefix, reports) -> None:
    """``<prefix>.csv`` with one row per report plus ``<prefix>.json``."""
    rows = []
    for r in reports:
        row = r.to_row()
        rows.append({k: (fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    write_csv(f"{prefix}.csv", REPORT_COLUMNS, rows)
    write_json(f"{prefix}.json", [r.to_dict() for r in reports])


def repetition_seed(seed: int, repetition: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(repetition)]).generate_state(1)[0])


def run_holdout(make_model, obs: Observations, plan: HoldoutPlan, cfg: SamplerConfig,
                label: str = ""):
    """Fit on each training split and score the error subset.

    ``make_model(train_obs)`` returns a model over the full hierarchy and
    source list. Returns ``(report, per_run_reports)``; random hold-outs are
    averaged over repetitions, each with its own sampler seed.
    """
    runs = []
    for rep in range(plan.n_runs):
        sp = split(obs, plan, rep)
        model = make_model(obs.take(sp.train))
        plan.check_grid(model.years)
        run_cfg = SamplerConfig(**{**cfg.to_dict(), "seed": repetition_seed(cfg.seed, rep)})
        res = nuts_sample(model, model.dim, run_cfg, names=model.param_names())
        d = model.derived(res.flat_draws())
        held = obs.take(sp.error)
        pred, keep = posterior_predictive(model, d["eta"], d["sigma_d"], held,
                                          repetition_seed(plan.seed + 1, rep))
        runs.append(summarize(pred, held.value[keep], label=f"{label} run {rep}".strip()))
        logger.info("hold-out run %d: %d eligible points, coverage %.1f%%",
                    rep, runs[-1].n_eligible, runs[-1].pct_included)
    report = runs[0] if len(runs) == 1 else average_reports(runs)
    report.label = label
    return report, runs


# --- synthetic data ------------------------------------------------------------------

def make_hierarchy(n_regions: int, subregions_per_region: int, countries_per_subregion) -> HierarchyIndex:
    """Regular skeleton with codes R1, R1S1, R1S1C1, ..."""
    if np.isscalar(countries_per_subregion):
        n_sub = n_regions * subregions_per_region
        countries_per_subregion = [int(countries_per_subregion)] * n_sub
    rows = []
    k = 0
    for r in range(n_regions):
        for s in range(subregions_per_region):
            for c in range(countries_per_subregion[k]):
                rows.append((f"R{r + 1}S{s + 1}C{c + 1}", f"R{r + 1}S{s + 1}", f"R{r + 1}"))
            k += 1
    return HierarchyIndex.from_rows(rows)


def reference_parameters(model: McprModel, rng) -> np.ndarray:
    """Plausible fixed hyperparameters with country effects drawn around them.

    World level near 18% in the reference year, pace around 0.1 per year on
    the logit scale, world asymptote 0.725, rho 0.8 and tau 0.05. Standardized
    deviates (hierarchy effects and AR(1) innovations) are drawn from ``rng``.
    """
    rng = np.random.default_rng(rng)
    u = model.layout.unpack(model.sample_prior(rng))
    u["Omega_w"][...] = -1.5
    u["log_sigma_Omega_c"][...] = np.log(0.5)
    u["log_sigma_Omega_r"][...] = np.log(0.3)
    key = "beta" if model.transition == "bspline" else "omega"
    u[f"{key}_w"][...] = -0.8
    for lvl in ("c", "s", "r"):
        u[f"log_sigma_{key}_{lvl}"][...] = np.log(0.3)
    u["lam_w"][...] = 0.0
    u["log_sigma_lam"][...] = np.log(0.5)
    u["logit_rho"][...] = np.log(0.8 / 0.2)
    u["log_tau"][...] = np.log(0.05)
    u["log_sigma_d"][...] = np.log(0.02)
    return model.layout.pack(u)


def generate_synthetic(model: McprModel, rng, q_true=None, n_obs=(4, 20), year_range=None,
                       sd_range=(0.01, 0.04), zero_noise: bool = False):
    """Simulate observations from the model's process and data models.

    ``model`` fixes the skeleton (hierarchy, grid, sources). True parameters
    are ``q_true`` (flat, unconstrained) or a prior draw. Returns
    ``(Observations, truth)`` where ``truth`` holds ``q`` and the derived
    quantities at it.
    """
    rng = np.random.default_rng(rng)
    q = model.sample_prior(rng) if q_true is None else np.asarray(q_true, dtype=float)
    truth = {k: v[0] for k, v in model.derived(q[None, :]).items()}
    truth["q"] = q
    years = model.years if year_range is None else np.arange(year_range[0], year_range[1] + 1)
    if years[0] < model.years[0] or years[-1] > model.years[-1]:
        raise ConfigError("observation years must lie on the model grid")
    cols = {k: [] for k in ("country", "year", "value", "sd", "source")}
    for c, code in enumerate(model.hierarchy.countries):
        n = int(rng.integers(n_obs[0], n_obs[1] + 1))
        ys = np.sort(rng.choice(years, size=min(n, years.size), replace=False))
        for yr in ys:
            d = int(rng.integers(len(model.sources)))
            eta = truth["eta"][c, yr - model.years[0]]
            if zero_noise:
                s, value = 0.0, eta
            else:
                s = float(rng.uniform(*sd_range))
                sd = np.hypot(s, truth["sigma_d"][d])
                value = float(truncnorm_draws(eta, sd, rng))
            cols["country"].append(code)
            cols["year"].append(int(yr))
            cols["value"].append(value)
            cols["sd"].append(s)
            cols["source"].append(model.sources[d])
    obs = Observations(cols["country"], cols["year"], cols["value"], cols["sd"], cols["source"])
    return obs, truth


def generate_synthetic_tfr(n_countries: int, rng, n_periods=(8, 12), start_year: int = 1950,
                           K: int = 7, degree: int = 2, tau: float = 0.1, beta_w=None,
                           sigma_beta: float = 0.3, omega_range=(5.5, 7.5)):
    """Phase II TFR series simulated from the TFR process model.

    Returns ``(series, truth)``; all simulated periods are flagged Phase II.
    """
    rng = np.random.default_rng(rng)
    ks = build_knots_tfr(K, degree)
    P = ks.n_basis - 2 * (degree + 1)
    beta_w = rng.standard_normal(P) if beta_w is None else np.asarray(beta_w, dtype=float)
    beta_c = beta_w[None, :] + sigma_beta * rng.standard_normal((n_countries, P))
    coef = constrain_tfr(beta_c, ks)
    series = []
    for c in range(n_countries):
        n = int(rng.integers(n_periods[0], n_periods[1] + 1))
        omega = float(rng.uniform(*omega_range))
        eta = np.empty(n)
        eta[0] = omega
        for t in range(1, n):
            f = f_bspline_vec(eta[t - 1], 1.0, omega, coef[c], ks)
            eta[t] = project_step(eta[t - 1:t], f, tau, rng)[0]
        years = start_year + PERIOD * np.arange(n)
        series.append(TfrSeries(f"C{c + 1}", years, eta, 0, n - 1))
    return series, {"beta_w": beta_w, "beta_c": beta_c, "coef": coef, "tau": tau}


# --- simulation-based calibration ----------------------------------------------------

@dataclass
class SbcSetup:
    """Skeleton for calibration replicates of the mCPR model."""

    hierarchy: HierarchyIndex
    years: tuple = (1980, 2020)
    ref_year: int = 1990
    K: int = 5
    degree: int = 2
    transition: str = "bspline"
    sources: tuple = ("DHS", "MICS")
    n_obs: tuple = (4, 10)
    sd_range: tuple = (0.01, 0.04)

    def model(self, obs=None) -> McprModel:
        return McprModel(self.hierarchy, obs, K=self.K, degree=self.degree, years=self.years,
                         ref_year=self.ref_year, transition=self.transition,
                         sources=self.sources)


def monitored(model: McprModel) -> tuple[list[str], np.ndarray]:
    """World transition parameters, world asymptote, rho, tau and sigma_d.

    Ranks are taken on the unconstrained coordinates; every transform is
    monotone, so ranks match those of the constrained values.
    """
    key = "beta_w" if model.transition == "bspline" else "omega_w"
    names, idx = [], []
    for block in (key, "lam_w", "logit_rho", "log_tau", "log_sigma_d"):
        ii = model.layout.index(block)
        idx.extend(ii.tolist())
        names.extend(model.layout.names()[i] for i in ii)
    return names, np.asarray(idx)


def nuts_fitter(model, seed: int, cfg: SamplerConfig):
    """Default SBC fitter: returns (draws (n, dim), divergence rate)."""
    res = nuts_sample(model, model.dim, SamplerConfig(**{**cfg.to_dict(), "seed": seed}))
    return res.flat_draws(), float(res.divergent.mean())


@dataclass
class SbcReport:
    names: list
    ranks: np.ndarray          # (replicates, monitored)
    n_rank_draws: int
    bins: int
    chi2: np.ndarray
    pvalue: np.ndarray
    flagged: list
    divergence_rate: np.ndarray

    @property
    def frac_pass(self) -> float:
        return float(np.mean(self.pvalue > 0.01))

    def to_dict(self) -> dict:
        return {"names": self.names, "ranks": self.ranks.tolist(),
                "n_rank_draws": self.n_rank_draws, "bins": self.bins,
                "chi2": self.chi2.tolist(), "pvalue": self.pvalue.tolist(),
                "flagged": self.flagged, "divergence_rate": self.divergence_rate.tolist(),
                "frac_pass": self.frac_pass}


def rank_statistic(draws, truth) -> np.ndarray:
    """Number of draws strictly below the truth, per parameter."""
    return np.sum(np.asarray(draws) < np.asarray(truth)[None, :], axis=0)


def binned_chi2(ranks, n_rank_draws: int, bins: int):
    """Chi-squared uniformity test of ranks in [0, n_rank_draws] over equal bins."""
    ranks = np.asarray(ranks)
    edges = np.linspace(0, n_rank_draws + 1, bins + 1)
    chi2, pval = [], []
    for col in ranks.T:
        counts, _ = np.histogram(col, bins=edges)
        res = stats.chisquare(counts)
        chi2.append(res.statistic)
        pval.append(res.pvalue)
    return np.asarray(chi2), np.asarray(pval)


def _sbc_replicate(args):
    setup, rep, seed, cfg, fitter, draw_truth, n_rank_draws = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
    skeleton = setup.model()
    q = draw_truth(skeleton, rng) if draw_truth is not None else skeleton.sample_prior(rng)
    obs, _ = generate_synthetic(skeleton, rng, q_true=q, n_obs=setup.n_obs,
                                sd_range=setup.sd_range)
    model = setup.model(obs)
    fit = fitter or nuts_fitter
    draws, div = fit(model, repetition_seed(seed, rep), cfg)
    _, idx = monitored(model)
    pick = np.linspace(0, draws.shape[0] - 1, n_rank_draws).round().astype(int)
    return rank_statistic(draws[pick][:, idx], q[idx]), div


def sbc(setup: SbcSetup, replicates: int = 20, cfg: SamplerConfig | None = None, seed: int = 0,
        fitter=None, draw_truth=None, n_rank_draws: int = 99, bins: int = 5,
        n_jobs: int = 1) -> SbcReport:
    """Simulation-based calibration over ``replicates`` prior draws.

    Each replicate draws true parameters (from the prior unless
    ``draw_truth(model, rng)`` is given), simulates data, refits with
    ``fitter(model, seed, cfg) -> (draws, divergence_rate)`` and records the
    rank of the truth among ``n_rank_draws`` evenly thinned draws. Replicates
    whose divergence rate exceeds 10% are flagged but kept.
    """
    if replicates < 20:
        raise ConfigError("SBC needs at least 20 replicates")
    cfg = cfg or SamplerConfig(chains=2, warmup=500, samples=500)
    jobs = [(setup, r, seed, cfg, fitter, draw_truth, n_rank_draws) for r in range(replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_sbc_replicate, jobs))
    else:
        results = [_sbc_replicate(j) for j in jobs]
    ranks = np.stack([r[0] for r in results])
    div = np.array([r[1] for r in results])
    chi2, pval = binned_chi2(ranks, n_rank_draws, bins)
    names, _ = monitored(setup.model())
    flagged = [int(i) for i in np.flatnonzero(div > 0.10)]
    return SbcReport(names, ranks, n_rank_draws, bins, chi2, pval, flagged, div)
