"""Hierarchical B-spline transition model for mCPR.

The latent logit-scale trajectory starts at a country level ``Omega_c`` in
the reference year and is propagated forwards and backwards with the
B-spline transition function plus AR(1) deviations. Observations follow a
normal data model truncated to [0, 1].

All hierarchical normals are non-centered: the flat parameter vector holds
standardized deviates and log/logit-transformed scales. ``log_density`` is
the readable reference (centered values plus the log-Jacobian of the map);
calling the model gives the same value together with a hand-derived
gradient, with the time recursion running in compiled code.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from . import _kernels
from .data import HierarchyIndex, Observations
from .errors import ConfigError, DataError
from .params import LOG_2, LOG_2PI, ParamLayout, halfnorm_lpdf, norm_lpdf, truncnorm_lpdf
from .spline import KnotSequence, basis_polynomials, build_knots_mcpr
from .transition import (approx_logistic_coefficients_vec, basis_peaks, constrain_mcpr,
                         expit, f_bspline_vec, logit, n_free_mcpr)

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 15.0
REF_YEAR = 1990
DEFAULT_YEARS = (1970, 2030)
TRANSITIONS = ("bspline", "approx_logistic")

# prior scales
SD_BETA_SCALE = 0.5
SD_TAU = 2.0
SD_NONSAMPLING = 0.1


class InvalidParameterWarning(UserWarning):
    """A density was evaluated at an invalid parameter value."""


def ar1_lag_matrix(T: int, ref: int):
    """Integer lags and mask for AR(1) chains radiating from index ``ref``.

    ``eps[t] = sum_s rho**lag[t, s] * w[s]`` over masked ``s``, where ``w``
    holds the scaled innovations.
    """
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    fwd = (t >= ref) & (s >= ref) & (s <= t)
    bwd = (t <= ref) & (s <= ref) & (s >= t)
    mask = fwd | bwd
    lag = np.where(mask, np.abs(t - s), 0).astype(float)
    return lag, mask


def propagate_logit(omega, eps, upper, coef, ks: KnotSequence, ref: int, clamp=LOGIT_CLAMP):
    """Logit-scale trajectories from reference levels (vectorized reference).

    Parameters
    ----------
    omega : (C,) logit level at index ``ref``
    eps : (C, T) deviations
    upper : (C,) upper asymptotes; the lower asymptote is 0
    coef : (C, J) constrained spline coefficients

    Returns ``(L, n_clamped)`` with ``L`` shaped (C, T).
    """
    omega = np.asarray(omega, dtype=float)
    eps = np.asarray(eps, dtype=float)
    C, T = eps.shape
    L = np.empty((C, T))
    L[:, ref] = omega
    clamped = 0
    for t in range(ref + 1, T):
        raw = L[:, t - 1] + f_bspline_vec(expit(L[:, t - 1]), 0.0, upper, coef, ks) + eps[:, t]
        clamped += int(np.sum(np.abs(raw) > clamp))
        L[:, t] = np.clip(raw, -clamp, clamp)
    for t in range(ref - 1, -1, -1):
        raw = L[:, t + 1] - f_bspline_vec(expit(L[:, t + 1]), 0.0, upper, coef, ks) - eps[:, t + 1]
        clamped += int(np.sum(np.abs(raw) > clamp))
        L[:, t] = np.clip(raw, -clamp, clamp)
    return L, clamped


def derive_eps(L, upper, coef, ks: KnotSequence, ref: int) -> np.ndarray:
    """Recover the deviations implied by a logit trajectory.

    Entry ``ref+1..`` comes from forward steps, ``..ref`` from backward
    steps; entry 0 is not identified by the trajectory and is returned as nan.
    """
    L = np.asarray(L, dtype=float)
    C, T = L.shape
    eps = np.full((C, T), np.nan)
    f = np.stack([f_bspline_vec(expit(L[:, t]), 0.0, upper, coef, ks) for t in range(T)], axis=1)
    for t in range(ref + 1, T):
        eps[:, t] = L[:, t] - L[:, t - 1] - f[:, t - 1]
    for t in range(ref):
        eps[:, t + 1] = L[:, t + 1] - L[:, t] - f[:, t + 1]
    return eps


def log_ar1(eps, rho, tau, ref: int):
    """AR(1) log density with a stationary start at ``ref`` and two chains
    running forwards and backwards from it."""
    if not (0.0 < rho < 1.0 and tau > 0.0):
        warnings.warn("AR(1) needs 0 < rho < 1 and tau > 0", InvalidParameterWarning)
        return -np.inf
    eps = np.asarray(eps, dtype=float)
    sd0 = tau / np.sqrt(1.0 - rho * rho)
    lp = np.sum(norm_lpdf(eps[:, ref], 0.0, sd0))
    lp += np.sum(norm_lpdf(eps[:, ref + 1:], rho * eps[:, ref:-1], tau))
    lp += np.sum(norm_lpdf(eps[:, :ref], rho * eps[:, 1:ref + 1], tau))
    return float(lp)


def _membership(idx, n: int) -> np.ndarray:
    """(n, len(idx)) 0/1 matrix summing children into their parents."""
    m = np.zeros((n, len(idx)))
    m[np.asarray(idx, dtype=int), np.arange(len(idx))] = 1.0
    return m


class McprModel:
    """Posterior for the mCPR transition model.

    Instances are callable as ``model(q) -> (logp, grad)`` on the flat
    unconstrained vector. They hold no mutable state, so one instance can be
    shared by any number of chains.
    """

    def __init__(self, hierarchy: HierarchyIndex, obs: Observations | None = None,
                 K: int = 5, degree: int = 2, years=DEFAULT_YEARS, ref_year: int = REF_YEAR,
                 transition: str = "bspline", sources=None):
        if transition not in TRANSITIONS:
            raise ConfigError(f"unknown transition {transition!r}")
        self.hierarchy = hierarchy
        self.ks = build_knots_mcpr(K, degree)
        self.K, self.degree = K, degree
        self.years = np.arange(years[0], years[1] + 1)
        if ref_year not in self.years:
            raise ConfigError(f"reference year {ref_year} not on the time grid")
        self.ref_year = ref_year
        self.ref = int(np.flatnonzero(self.years == ref_year)[0])
        self.T = len(self.years)
        self.P = n_free_mcpr(self.ks)
        self.J = self.ks.n_basis
        self.transition = transition
        self.peaks = basis_peaks(self.ks) if transition == "approx_logistic" else None
        self._set_data(obs, sources)
        self.layout = ParamLayout(self._blocks())
        self._lag, self._mask = ar1_lag_matrix(self.T, self.ref)
        self._m_sub = _membership(hierarchy.subregion_of, hierarchy.S)
        self._m_reg = _membership(hierarchy.region_of, hierarchy.R)
        self._breaks, self._poly = basis_polynomials(self.ks)
        self._hyper_index()

    # --- setup ----------------------------------------------------------------

    def _set_data(self, obs, sources):
        h = self.hierarchy
        if obs is None:
            obs = Observations([], [], [], [], [])
        self.sources = list(sources) if sources is not None else obs.sources
        cidx = {c: i for i, c in enumerate(h.countries)}
        sidx = {s: i for i, s in enumerate(self.sources)}
        unknown = sorted(set(obs.country.tolist()) - set(cidx))
        if unknown:
            raise DataError(f"observations for countries outside the hierarchy: {unknown[:5]}")
        off_grid = (obs.year < self.years[0]) | (obs.year > self.years[-1])
        if off_grid.any():
            raise DataError(f"{int(off_grid.sum())} observations fall outside the time grid")
        bad_src = sorted(set(obs.source_type.tolist()) - set(sidx))
        if bad_src:
            raise DataError(f"source types without a non-sampling error term: {bad_src}")
        self.obs = obs
        self.obs_c = np.array([cidx[c] for c in obs.country], dtype=np.int64)
        self.obs_t = (obs.year - self.years[0]).astype(np.int64)
        self.obs_d = np.array([sidx[s] for s in obs.source_type], dtype=np.int64)
        self.obs_y = obs.value.astype(float)
        self.obs_s = obs.sampling_sd.astype(float)
        if np.any(~np.isfinite(self.obs_s)):
            raise DataError("missing sampling SDs; impute before building the model")
        self._obs_s2 = self.obs_s ** 2

    def _blocks(self):
        h, P = self.hierarchy, self.P
        C, S, R, T, D = h.C, h.S, h.R, self.T, len(self.sources)
        blocks = [
            ("Omega_w", ()), ("log_sigma_Omega_c", ()), ("log_sigma_Omega_r", ()),
            ("Omega_r_z", (R,)), ("Omega_s_z", (S,)), ("Omega_c_z", (C,)),
        ]
        if self.transition == "bspline":
            blocks += [
                ("beta_w", (P,)), ("log_sigma_beta_c", (P,)), ("log_sigma_beta_s", (P,)),
                ("log_sigma_beta_r", (P,)), ("beta_r_z", (R, P)), ("beta_s_z", (S, P)),
                ("beta_c_z", (C, P)),
            ]
        else:
            blocks += [
                ("omega_w", ()), ("log_sigma_omega_c", ()), ("log_sigma_omega_s", ()),
                ("log_sigma_omega_r", ()), ("omega_r_z", (R,)), ("omega_s_z", (S,)),
                ("omega_c_z", (C,)),
            ]
        blocks += [
            ("lam_w", ()), ("log_sigma_lam", ()), ("lam_c_z", (C,)),
            ("logit_rho", ()), ("log_tau", ()), ("eps_z", (C, T)),
            ("log_sigma_d", (D,)),
        ]
        return blocks

    @property
    def dim(self) -> int:
        return self.layout.size

    def param_names(self) -> list[str]:
        return self.layout.names()

    # --- transforms -------------------------------------------------------------

    def constrain(self, flat):
        """Unconstrained vector -> (centered parameter dict, log-Jacobian)."""
        u = self.layout.unpack(np.asarray(flat, dtype=float))
        h = self.hierarchy
        sub, reg = h.subregion_of, h.region_of
        p = {}
        lj = 0.0

        def scale(name):
            nonlocal lj
            lj += float(np.sum(u[name]))
            return np.exp(u[name])

        def nest(mean, sd, z):
            nonlocal lj
            lj += z.shape[0] * float(np.sum(np.log(sd)))
            return mean + sd * z

        p["Omega_w"] = float(u["Omega_w"])
        p["sigma_Omega_c"] = scale("log_sigma_Omega_c")
        p["sigma_Omega_r"] = scale("log_sigma_Omega_r")
        p["Omega_r"] = nest(p["Omega_w"], p["sigma_Omega_r"], u["Omega_r_z"])
        p["Omega_s"] = nest(p["Omega_r"][reg], p["sigma_Omega_r"], u["Omega_s_z"])
        p["Omega_c"] = nest(p["Omega_s"][sub], p["sigma_Omega_c"], u["Omega_c_z"])

        if self.transition == "bspline":
            p["beta_w"] = u["beta_w"]
            for lvl in ("c", "s", "r"):
                p[f"sigma_beta_{lvl}"] = scale(f"log_sigma_beta_{lvl}")
            p["beta_r"] = nest(p["beta_w"][None, :], p["sigma_beta_r"], u["beta_r_z"])
            p["beta_s"] = nest(p["beta_r"][reg], p["sigma_beta_s"], u["beta_s_z"])
            p["beta_c"] = nest(p["beta_s"][sub], p["sigma_beta_c"], u["beta_c_z"])
        else:
            p["omega_w"] = float(u["omega_w"])
            for lvl in ("c", "s", "r"):
                p[f"sigma_omega_{lvl}"] = scale(f"log_sigma_omega_{lvl}")
            p["omega_r"] = nest(p["omega_w"], p["sigma_omega_r"], u["omega_r_z"])
            p["omega_s"] = nest(p["omega_r"][reg], p["sigma_omega_s"], u["omega_s_z"])
            p["omega_c"] = nest(p["omega_s"][sub], p["sigma_omega_c"], u["omega_c_z"])

        p["lam_w"] = float(u["lam_w"])
        p["sigma_lam"] = scale("log_sigma_lam")
        p["lam_c"] = nest(p["lam_w"], p["sigma_lam"], u["lam_c_z"])

        rho = float(expit(u["logit_rho"]))
        lj += np.log(rho) + np.log1p(-rho)
        tau = scale("log_tau")
        p["rho"], p["tau"] = rho, tau
        sd0 = tau / np.sqrt(1.0 - rho * rho)
        steps = np.where(np.arange(self.T) == self.ref, sd0, tau)
        lj += h.C * (np.log(sd0) + (self.T - 1) * np.log(tau))
        arm = np.where(self._mask, rho ** self._lag, 0.0)
        p["eps"] = (u["eps_z"] * steps[None, :]) @ arm.T

        p["sigma_d"] = scale("log_sigma_d")
        return p, float(lj)

    def unconstrain(self, p: dict) -> np.ndarray:
        """Centered parameter dict -> flat unconstrained vector."""
        h = self.hierarchy
        sub, reg = h.subregion_of, h.region_of
        u = {}
        u["Omega_w"] = p["Omega_w"]
        u["log_sigma_Omega_c"] = np.log(p["sigma_Omega_c"])
        u["log_sigma_Omega_r"] = np.log(p["sigma_Omega_r"])
        u["Omega_r_z"] = (np.asarray(p["Omega_r"]) - p["Omega_w"]) / p["sigma_Omega_r"]
        u["Omega_s_z"] = (np.asarray(p["Omega_s"]) - np.asarray(p["Omega_r"])[reg]) / p["sigma_Omega_r"]
        u["Omega_c_z"] = (np.asarray(p["Omega_c"]) - np.asarray(p["Omega_s"])[sub]) / p["sigma_Omega_c"]
        if self.transition == "bspline":
            u["beta_w"] = p["beta_w"]
            for lvl in ("c", "s", "r"):
                u[f"log_sigma_beta_{lvl}"] = np.log(p[f"sigma_beta_{lvl}"])
            u["beta_r_z"] = (np.asarray(p["beta_r"]) - np.asarray(p["beta_w"])[None]) / p["sigma_beta_r"]
            u["beta_s_z"] = (np.asarray(p["beta_s"]) - np.asarray(p["beta_r"])[reg]) / p["sigma_beta_s"]
            u["beta_c_z"] = (np.asarray(p["beta_c"]) - np.asarray(p["beta_s"])[sub]) / p["sigma_beta_c"]
        else:
            u["omega_w"] = p["omega_w"]
            for lvl in ("c", "s", "r"):
                u[f"log_sigma_omega_{lvl}"] = np.log(p[f"sigma_omega_{lvl}"])
            u["omega_r_z"] = (np.asarray(p["omega_r"]) - p["omega_w"]) / p["sigma_omega_r"]
            u["omega_s_z"] = (np.asarray(p["omega_s"]) - np.asarray(p["omega_r"])[reg]) / p["sigma_omega_s"]
            u["omega_c_z"] = (np.asarray(p["omega_c"]) - np.asarray(p["omega_s"])[sub]) / p["sigma_omega_c"]
        u["lam_w"] = p["lam_w"]
        u["log_sigma_lam"] = np.log(p["sigma_lam"])
        u["lam_c_z"] = (np.asarray(p["lam_c"]) - p["lam_w"]) / p["sigma_lam"]
        rho, tau = float(p["rho"]), float(p["tau"])
        u["logit_rho"] = logit(rho)
        u["log_tau"] = np.log(tau)
        eps = np.asarray(p["eps"], dtype=float)
        z = np.empty_like(eps)
        r = self.ref
        z[:, r] = eps[:, r] * np.sqrt(1.0 - rho * rho) / tau
        z[:, r + 1:] = (eps[:, r + 1:] - rho * eps[:, r:-1]) / tau
        z[:, :r] = (eps[:, :r] - rho * eps[:, 1:r + 1]) / tau
        u["eps_z"] = z
        u["log_sigma_d"] = np.log(p["sigma_d"])
        return self.layout.pack(u)

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        """One flat unconstrained draw from the prior."""
        u = {}
        for name, (_, shape) in self.layout.blocks.items():
            u[name] = rng.standard_normal(shape)
        P = self.P
        u["log_sigma_Omega_c"] = np.log(abs(rng.standard_normal()))
        u["log_sigma_Omega_r"] = np.log(abs(rng.standard_normal()))
        if self.transition == "bspline":
            for lvl in ("c", "s", "r"):
                u[f"log_sigma_beta_{lvl}"] = np.log(np.abs(SD_BETA_SCALE * rng.standard_normal(P)))
        else:
            for lvl in ("c", "s", "r"):
                u[f"log_sigma_omega_{lvl}"] = np.log(abs(rng.standard_normal()))
        u["log_sigma_lam"] = np.log(abs(rng.standard_normal()))
        u["logit_rho"] = logit(rng.uniform())
        u["log_tau"] = np.log(abs(SD_TAU * rng.standard_normal()))
        u["log_sigma_d"] = np.log(np.abs(SD_NONSAMPLING * rng.standard_normal(len(self.sources))))
        return self.layout.pack(u)

    # --- model pieces -----------------------------------------------------------

    def _coefficients(self, lam_c, beta_c=None, omega_c=None):
        upper = 0.5 + 0.45 * expit(lam_c)
        if self.transition == "bspline":
            return upper, constrain_mcpr(beta_c, self.ks)
        omega = 0.5 * expit(omega_c)
        return upper, approx_logistic_coefficients_vec(upper, omega, self.peaks, self.ks)

    def coefficients(self, p: dict):
        """(upper asymptotes (C,), constrained coefficients (C, J))."""
        return self._coefficients(p["lam_c"], p.get("beta_c"), p.get("omega_c"))

    def propagate(self, p: dict):
        """Logit trajectories (C, T) and the number of clamped steps."""
        upper, coef = self.coefficients(p)
        return propagate_logit(p["Omega_c"], p["eps"], upper, coef, self.ks, self.ref)

    def log_prior(self, p: dict) -> float:
        """Hierarchical normal terms plus hyperpriors, on centered values."""
        scales = [v for k, v in p.items() if k.startswith("sigma_") or k == "tau"]
        if any(np.any(np.asarray(s) <= 0.0) for s in scales):
            warnings.warn("non-positive scale parameter", InvalidParameterWarning)
            return -np.inf
        if not 0.0 < p["rho"] < 1.0:
            return -np.inf
        sub, reg = self.hierarchy.subregion_of, self.hierarchy.region_of
        lp = 0.0
        lp += norm_lpdf(p["Omega_w"], 0.0, 1.0)
        lp += halfnorm_lpdf(p["sigma_Omega_c"], 1.0) + halfnorm_lpdf(p["sigma_Omega_r"], 1.0)
        lp += np.sum(norm_lpdf(p["Omega_r"], p["Omega_w"], p["sigma_Omega_r"]))
        lp += np.sum(norm_lpdf(p["Omega_s"], p["Omega_r"][reg], p["sigma_Omega_r"]))
        lp += np.sum(norm_lpdf(p["Omega_c"], p["Omega_s"][sub], p["sigma_Omega_c"]))
        if self.transition == "bspline":
            lp += np.sum(norm_lpdf(p["beta_w"], 0.0, 1.0))
            for lvl in ("c", "s", "r"):
                lp += np.sum(halfnorm_lpdf(p[f"sigma_beta_{lvl}"], SD_BETA_SCALE))
            lp += np.sum(norm_lpdf(p["beta_r"], p["beta_w"][None, :], p["sigma_beta_r"]))
            lp += np.sum(norm_lpdf(p["beta_s"], p["beta_r"][reg], p["sigma_beta_s"]))
            lp += np.sum(norm_lpdf(p["beta_c"], p["beta_s"][sub], p["sigma_beta_c"]))
        else:
            lp += norm_lpdf(p["omega_w"], 0.0, 1.0)
            for lvl in ("c", "s", "r"):
                lp += halfnorm_lpdf(p[f"sigma_omega_{lvl}"], 1.0)
            lp += np.sum(norm_lpdf(p["omega_r"], p["omega_w"], p["sigma_omega_r"]))
            lp += np.sum(norm_lpdf(p["omega_s"], p["omega_r"][reg], p["sigma_omega_s"]))
            lp += np.sum(norm_lpdf(p["omega_c"], p["omega_s"][sub], p["sigma_omega_c"]))
        lp += norm_lpdf(p["lam_w"], 0.0, 1.0) + halfnorm_lpdf(p["sigma_lam"], 1.0)
        lp += np.sum(norm_lpdf(p["lam_c"], p["lam_w"], p["sigma_lam"]))
        # rho ~ Uniform(0, 1) contributes 0 on its support
        lp += halfnorm_lpdf(p["tau"], SD_TAU)
        lp += np.sum(halfnorm_lpdf(p["sigma_d"], SD_NONSAMPLING))
        return float(lp)

    def log_ar1(self, p: dict) -> float:
        return log_ar1(p["eps"], p["rho"], p["tau"], self.ref)

    def log_likelihood(self, eta, sigma_d) -> float:
        """Truncated-normal data model over all observations."""
        if self.obs_y.size == 0:
            return 0.0
        var = self._obs_s2 + np.asarray(sigma_d)[self.obs_d] ** 2
        if np.any(var <= 0.0):
            raise ConfigError("observation with zero total variance")
        mu = eta[self.obs_c, self.obs_t]
        return float(np.sum(truncnorm_lpdf(self.obs_y, mu, np.sqrt(var), 0.0, 1.0)))

    def log_density(self, flat) -> float:
        """Reference evaluation of the joint log density on the unconstrained scale."""
        p, lj = self.constrain(flat)
        L, _ = self.propagate(p)
        return (self.log_prior(p) + self.log_ar1(p)
                + self.log_likelihood(expit(L), p["sigma_d"]) + lj)

    # --- fast path --------------------------------------------------------------

    def _values(self, u):
        """Centered quantities needed by the process model, from unpacked ``u``."""
        v = {}
        v["s_Oc"] = np.exp(u["log_sigma_Omega_c"])
        v["s_Or"] = np.exp(u["log_sigma_Omega_r"])
        v["Omega_r"] = u["Omega_w"] + v["s_Or"] * u["Omega_r_z"]
        v["Omega_s"] = v["Omega_r"][self.hierarchy.region_of] + v["s_Or"] * u["Omega_s_z"]
        v["Omega_c"] = v["Omega_s"][self.hierarchy.subregion_of] + v["s_Oc"] * u["Omega_c_z"]
        key = "beta" if self.transition == "bspline" else "omega"
        for lvl in ("c", "s", "r"):
            v[f"s_{lvl}"] = np.exp(u[f"log_sigma_{key}_{lvl}"])
        w = u[f"{key}_w"]
        v["x_r"] = (w[None, :] if key == "beta" else w) + v["s_r"] * u[f"{key}_r_z"]
        v["x_s"] = v["x_r"][self.hierarchy.region_of] + v["s_s"] * u[f"{key}_s_z"]
        v["x_c"] = v["x_s"][self.hierarchy.subregion_of] + v["s_c"] * u[f"{key}_c_z"]
        v["s_lam"] = np.exp(u["log_sigma_lam"])
        v["lam_c"] = u["lam_w"] + v["s_lam"] * u["lam_c_z"]
        v["e_lam"] = expit(v["lam_c"])
        v["upper"] = 0.5 + 0.45 * v["e_lam"]
        if key == "beta":
            v["e_x"] = expit(v["x_c"])
            coef = np.zeros((self.hierarchy.C, self.J))
            coef[:, :self.P] = 0.01 + 0.29 * v["e_x"]
        else:
            v["e_x"] = expit(v["x_c"])
            v["om"] = 0.5 * v["e_x"]
            coef = approx_logistic_coefficients_vec(v["upper"], v["om"], self.peaks, self.ks)
        v["coef"] = np.ascontiguousarray(coef)
        rho = float(expit(u["logit_rho"]))
        tau = float(np.exp(u["log_tau"]))
        v["rho"], v["tau"] = rho, tau
        v["sd0"] = tau / np.sqrt(1.0 - rho * rho)
        steps = np.full(self.T, tau)
        steps[self.ref] = v["sd0"]
        v["steps"] = steps
        v["eps"] = _kernels.ar1_build(u["eps_z"] * steps, rho, self.ref)
        v["sigma_d"] = np.exp(u["log_sigma_d"])
        return v

    def _forward(self, v):
        return _kernels.forward(np.ascontiguousarray(v["Omega_c"]), v["eps"], v["upper"],
                                v["coef"], self._breaks, self._poly, self.ref, LOGIT_CLAMP)

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        u = self.layout.unpack(q)
        g = np.zeros(self.dim)
        gu = self.layout.unpack(g)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            v = self._values(u)
            lp = self._hyper(q, g)
            L, eta, clamped, span, pos, dfdx = self._forward(v)
            if self.obs_y.size:
                ll, gL, gsd = _kernels.loglik_grad(eta, self.obs_c, self.obs_t, self.obs_y,
                                                    self._obs_s2, self.obs_d, v["sigma_d"])
            else:
                ll, gL, gsd = 0.0, np.zeros_like(L), np.zeros(len(self.sources))
            lp += ll
            if not np.isfinite(lp):
                return -np.inf, np.zeros(self.dim)
            g_om, g_eps, g_up, g_coef = _kernels.reverse(gL, eta, clamped, span, pos, dfdx,
                                                         self._poly, v["upper"], self.ref)
            self._backprop(u, v, gu, g_om, g_eps, g_up, g_coef, gsd)
        if not np.all(np.isfinite(g)):
            return -np.inf, np.zeros(self.dim)
        return float(lp), g

    def logp_and_grad(self, q):
        return self(q)

    def _hyper_index(self):
        """Flat positions of standard-normal deviates and half-normal log-scales."""
        z_idx, hn_idx, hn_sd = [], [], []
        key, sd_x = ("beta", SD_BETA_SCALE) if self.transition == "bspline" else ("omega", 1.0)
        scale_sd = {"log_sigma_Omega_c": 1.0, "log_sigma_Omega_r": 1.0, "log_sigma_lam": 1.0,
                    "log_tau": SD_TAU, "log_sigma_d": SD_NONSAMPLING}
        for lvl in ("c", "s", "r"):
            scale_sd[f"log_sigma_{key}_{lvl}"] = sd_x
        for name in self.layout.blocks:
            idx = self.layout.index(name)
            if name.endswith("_z") or name.endswith("_w"):
                z_idx.append(idx)
            elif name in scale_sd:
                hn_idx.append(idx)
                hn_sd.append(np.full(idx.size, scale_sd[name]))
        self._z_idx = np.concatenate(z_idx)
        self._hn_idx = np.concatenate(hn_idx)
        hn_sd = np.concatenate(hn_sd)
        self._hn_inv_var = 1.0 / hn_sd ** 2
        self._hn_const = float(np.sum(LOG_2 - 0.5 * LOG_2PI - np.log(hn_sd)))
        self._rho_idx = int(self.layout.index("logit_rho")[0])

    def _hyper(self, q, g) -> float:
        """Prior plus log-Jacobian in non-centered form; gradient into ``g``.

        For ``x = m + s * z`` the centered normal density of ``x`` times the
        Jacobian ``s`` is exactly the standard normal density of ``z``; the
        AR(1) deviations reduce the same way to their standardized
        innovations. Log-scales carry a half-normal prior plus the log
        Jacobian ``u``.
        """
        z = q[self._z_idx]
        lp = -0.5 * float(z @ z) - 0.5 * LOG_2PI * z.size
        g[self._z_idx] -= z
        uh = q[self._hn_idx]
        s2 = np.exp(2.0 * uh) * self._hn_inv_var
        lp += self._hn_const + float(np.sum(uh - 0.5 * s2))
        g[self._hn_idx] += 1.0 - s2
        rho = float(expit(q[self._rho_idx]))
        lp += np.log(rho) + np.log1p(-rho)
        g[self._rho_idx] += 1.0 - 2.0 * rho
        return float(lp)

    def _backprop(self, u, v, gu, g_om, g_eps, g_up, g_coef, gsd):
        m_sub, m_reg = self._m_sub, self._m_reg
        # Omega: country <- subregion <- region <- world
        gu["Omega_c_z"] += g_om * v["s_Oc"]
        g_s_oc = float(g_om @ u["Omega_c_z"])
        g_os = m_sub @ g_om
        gu["Omega_s_z"] += g_os * v["s_Or"]
        g_s_or = float(g_os @ u["Omega_s_z"])
        g_or = m_reg @ g_os
        gu["Omega_r_z"] += g_or * v["s_Or"]
        g_s_or += float(g_or @ u["Omega_r_z"])
        gu["Omega_w"] += g_or.sum()
        gu["log_sigma_Omega_c"] += g_s_oc * v["s_Oc"]
        gu["log_sigma_Omega_r"] += g_s_or * v["s_Or"]

        # transition parameters
        P = self.P
        if self.transition == "bspline":
            g_x = g_coef[:, :P] * 0.29 * v["e_x"] * (1.0 - v["e_x"])
        else:
            p = self.peaks
            U = v["upper"][:, None]
            om = v["om"][:, None]
            den = p * U - 1.0
            g_omega = np.sum(g_coef[:, :P] * (p - 1.0) / den, axis=1)
            g_up = g_up - np.sum(g_coef[:, :P] * (p - 1.0) * om * p / den ** 2, axis=1)
            g_x = g_omega * 0.5 * v["e_x"] * (1.0 - v["e_x"])
        key = "beta" if self.transition == "bspline" else "omega"
        gu[f"{key}_c_z"] += g_x * v["s_c"]
        g_sc = np.sum(g_x * u[f"{key}_c_z"], axis=0)
        g_xs = m_sub @ g_x
        gu[f"{key}_s_z"] += g_xs * v["s_s"]
        g_ss = np.sum(g_xs * u[f"{key}_s_z"], axis=0)
        g_xr = m_reg @ g_xs
        gu[f"{key}_r_z"] += g_xr * v["s_r"]
        g_sr = np.sum(g_xr * u[f"{key}_r_z"], axis=0)
        gu[f"{key}_w"] += np.sum(g_xr, axis=0)
        gu[f"log_sigma_{key}_c"] += g_sc * v["s_c"]
        gu[f"log_sigma_{key}_s"] += g_ss * v["s_s"]
        gu[f"log_sigma_{key}_r"] += g_sr * v["s_r"]

        # upper asymptotes
        g_lam = g_up * 0.45 * v["e_lam"] * (1.0 - v["e_lam"])
        gu["lam_c_z"] += g_lam * v["s_lam"]
        gu["log_sigma_lam"] += float(g_lam @ u["lam_c_z"]) * v["s_lam"]
        gu["lam_w"] += g_lam.sum()

        # AR(1) deviations
        rho, tau = v["rho"], v["tau"]
        g_w, g_rho = _kernels.ar1_adjoint(g_eps, v["eps"], rho, self.ref)
        gu["eps_z"] += g_w * v["steps"]
        g_steps = np.sum(g_w * u["eps_z"], axis=0)
        g_tau = g_steps.sum() - g_steps[self.ref] + g_steps[self.ref] * v["sd0"] / tau
        g_rho += g_steps[self.ref] * v["sd0"] * rho / (1.0 - rho * rho)
        gu["log_tau"] += g_tau * tau
        gu["logit_rho"] += g_rho * rho * (1.0 - rho)

        gu["log_sigma_d"] += gsd * v["sigma_d"]

    # --- derived quantities -----------------------------------------------------

    def derived(self, draws: np.ndarray) -> dict:
        """Derived quantities for draws shaped (..., dim); arrays gain the
        leading draw shape."""
        draws = np.asarray(draws, dtype=float)
        lead = draws.shape[:-1]
        flat = draws.reshape(-1, self.dim)
        rows = []
        for q in flat:
            u = self.layout.unpack(q)
            v = self._values(u)
            _, eta, clamped = self._forward(v)[:3]
            out = {"eta": eta, "upper": v["upper"], "coef": v["coef"],
                   "clamped": int(clamped.sum()), "rho": v["rho"], "tau": v["tau"],
                   "sigma_d": v["sigma_d"], "lam_w": float(u["lam_w"])}
            world_upper = 0.5 + 0.45 * expit(float(u["lam_w"]))
            out["world_upper"] = world_upper
            if self.transition == "bspline":
                out["beta_w"] = u["beta_w"].copy()
                out["coef_s"] = constrain_mcpr(v["x_s"], self.ks)
                out["coef_r"] = constrain_mcpr(v["x_r"], self.ks)
            else:
                out["omega_w"] = float(u["omega_w"])
                for lvl in ("s", "r"):
                    om = 0.5 * expit(v[f"x_{lvl}"])
                    out[f"coef_{lvl}"] = approx_logistic_coefficients_vec(
                        np.full(om.shape, world_upper), om, self.peaks, self.ks)
            rows.append(out)
        result = {}
        for k in rows[0]:
            arr = np.asarray([r[k] for r in rows])
            result[k] = arr.reshape(lead + arr.shape[1:])
        return result

    def transition_curve(self, coef, upper, eta_grid):
        """f_b over ``eta_grid`` for coefficient sets (..., J) and uppers (...)."""
        coef = np.asarray(coef)[..., None, :]
        upper = np.asarray(upper)[..., None]
        return f_bspline_vec(np.asarray(eta_grid), 0.0, upper, coef, self.ks)
