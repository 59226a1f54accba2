"""Multi-chain driver: warmup adaptation, sampling, and diagnostics."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import multiprocessing as mp

import numpy as np

from ..errors import ConfigError
from .adaptation import DualAveraging, WelfordVariance, WindowSchedule, check_step_size
from .diagnostics import summarize_draws
from .nuts import NUTS, find_initial_point

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    adapt_delta: float = 0.8
    max_treedepth: int = 10
    seed: int = 0
    init_radius: float = 2.0
    n_jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.adapt_delta < 1.0:
            raise ConfigError("adapt_delta must lie in (0, 1)")
        if self.max_treedepth < 1:
            raise ConfigError("max_treedepth must be >= 1")
        if self.chains < 1 or self.samples < 1 or self.warmup < 0:
            raise ConfigError("chains and samples must be positive, warmup non-negative")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SamplerConfig":
        """Named presets: ``validation`` (250/500), ``final`` (500/750), ``tfr``."""
        presets = {
            "validation": dict(warmup=250, samples=500, adapt_delta=0.999, max_treedepth=15),
            "final": dict(warmup=500, samples=750, adapt_delta=0.999, max_treedepth=14),
            "tfr": dict(warmup=500, samples=500, adapt_delta=0.999, max_treedepth=12),
        }
        if name not in presets:
            raise ConfigError(f"unknown sampler preset {name!r}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainDiagnostics:
    divergences: np.ndarray
    treedepth_hits: np.ndarray
    mean_accept: np.ndarray
    step_size: np.ndarray
    rhat: np.ndarray
    ess_bulk: np.ndarray
    names: list[str] = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        # inf (stuck chains) counts; nan (constant draws) does not
        r = self.rhat[~np.isnan(self.rhat)]
        return float(r.max()) if r.size else float("nan")

    def to_dict(self) -> dict:
        finite = np.isfinite(self.ess_bulk)
        return {
            "divergences": self.divergences.tolist(),
            "treedepth_hits": self.treedepth_hits.tolist(),
            "mean_accept": self.mean_accept.tolist(),
            "step_size": self.step_size.tolist(),
            "max_rhat": self.max_rhat if np.isfinite(self.max_rhat) else None,
            "min_ess_bulk": float(self.ess_bulk[finite].min()) if finite.any() else None,
            "max_ess_bulk": float(self.ess_bulk[finite].max()) if finite.any() else None,
            "rhat": {n: (None if not np.isfinite(r) else float(r))
                     for n, r in zip(self.names, self.rhat)},
        }


@dataclass
class SampleResult:
    draws: np.ndarray          # (chains, samples, dim), unconstrained
    accept_stat: np.ndarray    # (chains, samples)
    treedepth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    energy: np.ndarray
    step_size: np.ndarray      # (chains,)
    inv_metric: np.ndarray     # (chains, dim)
    diagnostics: ChainDiagnostics
    elapsed: float

    def flat_draws(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(chain)]))


def run_chain(target, dim, cfg: SamplerConfig, chain: int, init=None,
              inv_metric=None, adapt_metric=True):
    """Run one chain; returns a dict of arrays."""
    rng = chain_rng(cfg.seed, chain)
    q = find_initial_point(target, dim, rng, cfg.init_radius, init=init)
    kernel = NUTS(target, dim, rng, 1.0, inv_metric, cfg.max_treedepth)
    z = kernel.point(q)

    if cfg.warmup > 0:
        kernel.init_step_size(z)
    averager = DualAveraging(cfg.adapt_delta)
    averager.restart(kernel.step_size)
    windows = WindowSchedule(cfg.warmup)
    var = WelfordVariance(dim)

    for _ in range(cfg.warmup):
        _, z, stats = kernel.transition(z)
        kernel.step_size = averager.update(stats.accept_stat)
        check_step_size(kernel.step_size)
        collect, update = windows.step()
        if not adapt_metric:
            continue
        if collect:
            var.add(z.q)
        if update:
            kernel.inv_metric = var.regularized()
            var.restart()
            kernel.init_step_size(z)
            averager.restart(kernel.step_size)
    if cfg.warmup > 0:
        kernel.step_size = averager.final()
        check_step_size(kernel.step_size)

    n = cfg.samples
    out = {
        "draws": np.empty((n, dim)),
        "accept_stat": np.empty(n),
        "treedepth": np.empty(n, dtype=int),
        "n_leapfrog": np.empty(n, dtype=int),
        "divergent": np.empty(n, dtype=bool),
        "energy": np.empty(n),
    }
    for i in range(n):
        _, z, stats = kernel.transition(z)
        out["draws"][i] = z.q
        out["accept_stat"][i] = stats.accept_stat
        out["treedepth"][i] = stats.treedepth
        out["n_leapfrog"][i] = stats.n_leapfrog
        out["divergent"][i] = stats.divergent
        out["energy"][i] = stats.energy
    out["step_size"] = kernel.step_size
    out["inv_metric"] = kernel.inv_metric.copy()
    return out


def _chain_job(args):
    return run_chain(*args)


def nuts_sample(target, dim: int, cfg: SamplerConfig, names=None, inits=None,
                inv_metric=None, adapt_metric=True) -> SampleResult:
    """Draw ``cfg.chains`` NUTS chains from ``target``.

    ``target(q) -> (logp, grad)`` must be picklable when ``cfg.n_jobs > 1``.
    Chain ``k`` draws from an RNG seeded by ``(cfg.seed, k)``, so serial and
    parallel runs agree exactly.
    """
    start = time.perf_counter()
    inits = [None] * cfg.chains if inits is None else list(inits)
    jobs = [(target, dim, cfg, k, inits[k], inv_metric, adapt_metric)
            for k in range(cfg.chains)]
    if cfg.n_jobs > 1 and cfg.chains > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.n_jobs, mp_context=ctx) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]

    stack = {k: np.stack([r[k] for r in results]) for k in results[0]}
    names = list(names) if names is not None else [f"q[{i}]" for i in range(dim)]
    if cfg.chains > 1 and cfg.samples >= 4:
        rhat, ess = summarize_draws(stack["draws"])
    else:
        rhat = np.full(dim, np.nan)
        ess = np.full(dim, np.nan)
    diag = ChainDiagnostics(
        divergences=stack["divergent"].sum(axis=1),
        treedepth_hits=(stack["treedepth"] >= cfg.max_treedepth).sum(axis=1),
        mean_accept=stack["accept_stat"].mean(axis=1),
        step_size=stack["step_size"],
        rhat=rhat,
        ess_bulk=ess,
        names=names,
    )
    elapsed = time.perf_counter() - start
    logger.info("sampled %d chains in %.1fs; max R-hat %.3f, divergences %d",
                cfg.chains, elapsed, diag.max_rhat, int(diag.divergences.sum()))
    return SampleResult(
        draws=stack["draws"], accept_stat=stack["accept_stat"],
        treedepth=stack["treedepth"], n_leapfrog=stack["n_leapfrog"],
        divergent=stack["divergent"], energy=stack["energy"],
        step_size=stack["step_size"], inv_metric=stack["inv_metric"],
        diagnostics=diag, elapsed=elapsed,
    )
