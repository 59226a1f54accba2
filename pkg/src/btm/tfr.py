"""B-spline transition model for the Phase II decline of TFR.

Observed Phase II values are taken as the true TFR, so the process model
turns into a regression of period-to-period changes on the previous level:
``eta_t - eta_{t-1} = f_b(eta_{t-1}) + eps_t`` with white noise ``eps``.
Each country's transition starts at its first Phase II value (the upper
asymptote) and is bounded below by a TFR of 1.

The transition coefficients follow a country | world hierarchy with one
scale per coefficient, written in non-centered form. Because the levels are
data, the basis rows are fixed and the log density and its gradient are
plain array expressions.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import truncnorm

from .data import TfrSeries
from .errors import ConfigError, DataError
from .params import LOG_2, LOG_2PI, ParamLayout, halfnorm_lpdf, norm_lpdf
from .spline import KnotSequence, basis_matrix, build_knots_tfr
from .transition import TFR_FLOOR, TFR_RANGE, constrain_tfr, expit, f_bspline_vec, n_free_tfr

TFR_LOWER = 1.0
PERIOD = 5
PROJECTION_END = 2095


def tfr_propagate(omega: float, coef, eps, ks: KnotSequence) -> np.ndarray:
    """Trajectory from ``omega`` forward: eta_t = eta_{t-1} + f_b(eta_{t-1}) + eps_t.

    ``eps[0]`` is unused (the first period is ``omega`` itself).
    """
    if not omega > TFR_LOWER:
        raise ConfigError(f"first Phase II value {omega} must exceed {TFR_LOWER}")
    eps = np.asarray(eps, dtype=float)
    coef = np.asarray(coef, dtype=float)
    eta = np.empty(eps.shape[0])
    eta[0] = omega
    for t in range(1, eta.size):
        f = f_bspline_vec(eta[t - 1], TFR_LOWER, omega, coef, ks)
        eta[t] = eta[t - 1] + f + eps[t]
    return eta


class TfrModel:
    """Posterior for the TFR transition model; callable as ``model(q) -> (logp, grad)``."""

    def __init__(self, series: list[TfrSeries], K: int = 7, degree: int = 2):
        if not series:
            raise DataError("no TFR series supplied")
        self.series = list(series)
        self.countries = [s.country for s in self.series]
        self.ks = build_knots_tfr(K, degree)
        self.K, self.degree = K, degree
        self.J = self.ks.n_basis
        self.P = n_free_tfr(self.ks)
        self.C = len(self.series)
        omega = []
        rows_c, prev, nxt = [], [], []
        for c, s in enumerate(self.series):
            p2 = s.phase2
            if not p2[0] > TFR_LOWER:
                raise ConfigError(f"{s.country}: first Phase II value {p2[0]} must exceed 1")
            omega.append(p2[0])
            rows_c += [c] * (p2.size - 1)
            prev += list(p2[:-1])
            nxt += list(p2[1:])
        if not rows_c:
            raise DataError("need at least two Phase II observations in some country")
        self.omega = np.asarray(omega)
        self.row_c = np.asarray(rows_c, dtype=int)
        self.prev = np.asarray(prev)
        self.next = np.asarray(nxt)
        x = (self.prev - TFR_LOWER) / (self.omega[self.row_c] - TFR_LOWER)
        x = np.clip(x, self.ks.lower, self.ks.upper)
        lo = degree + 1
        self.basis = basis_matrix(self.ks, x)[:, lo:lo + self.P]
        self.layout = ParamLayout([
            ("beta_w", (self.P,)), ("log_sigma_beta_c", (self.P,)),
            ("beta_c_z", (self.C, self.P)), ("log_tau", ()),
        ])

    @property
    def dim(self) -> int:
        return self.layout.size

    def param_names(self) -> list[str]:
        return self.layout.names()

    # --- transforms ---------------------------------------------------------------

    def constrain(self, flat):
        """Unconstrained vector -> (centered parameters, log-Jacobian)."""
        u = self.layout.unpack(np.asarray(flat, dtype=float))
        sigma = np.exp(u["log_sigma_beta_c"])
        tau = float(np.exp(u["log_tau"]))
        p = {"beta_w": u["beta_w"], "sigma_beta_c": sigma, "tau": tau,
             "beta_c": u["beta_w"][None, :] + sigma * u["beta_c_z"]}
        lj = float(np.sum(u["log_sigma_beta_c"]) + u["log_tau"]
                   + self.C * np.sum(u["log_sigma_beta_c"]))
        return p, lj

    def unconstrain(self, p: dict) -> np.ndarray:
        sigma = np.asarray(p["sigma_beta_c"], dtype=float)
        return self.layout.pack({
            "beta_w": p["beta_w"], "log_sigma_beta_c": np.log(sigma),
            "beta_c_z": (np.asarray(p["beta_c"]) - np.asarray(p["beta_w"])[None, :]) / sigma,
            "log_tau": np.log(p["tau"]),
        })

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        return self.layout.pack({
            "beta_w": rng.standard_normal(self.P),
            "log_sigma_beta_c": np.log(np.abs(rng.standard_normal(self.P))),
            "beta_c_z": rng.standard_normal((self.C, self.P)),
            "log_tau": np.log(abs(rng.standard_normal())),
        })

    def coefficients(self, beta_c) -> np.ndarray:
        """Constrained coefficients (..., J) with both ends zeroed."""
        return constrain_tfr(beta_c, self.ks)

    # --- densities ----------------------------------------------------------------

    def residuals(self, beta_c) -> np.ndarray:
        h = TFR_FLOOR + TFR_RANGE * expit(np.asarray(beta_c))
        f = np.sum(self.basis * h[self.row_c], axis=1)
        return self.next - self.prev - f

    def log_prior(self, p: dict) -> float:
        if np.any(np.asarray(p["sigma_beta_c"]) <= 0.0) or not p["tau"] > 0.0:
            return -np.inf
        lp = np.sum(norm_lpdf(p["beta_w"], 0.0, 1.0))
        lp += np.sum(halfnorm_lpdf(p["sigma_beta_c"], 1.0))
        lp += np.sum(norm_lpdf(p["beta_c"], p["beta_w"][None, :], p["sigma_beta_c"]))
        lp += halfnorm_lpdf(p["tau"], 1.0)
        return float(lp)

    def log_likelihood(self, beta_c, tau: float) -> float:
        """White-noise density of the observed changes around f_b."""
        if not tau > 0.0:
            return -np.inf
        return float(np.sum(norm_lpdf(self.residuals(beta_c), 0.0, tau)))

    def log_density(self, flat) -> float:
        """Reference joint log density on the unconstrained scale."""
        p, lj = self.constrain(flat)
        return self.log_prior(p) + self.log_likelihood(p["beta_c"], p["tau"]) + lj

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        u = self.layout.unpack(q)
        g = np.zeros(self.dim)
        gu = self.layout.unpack(g)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            sigma = np.exp(u["log_sigma_beta_c"])
            log_tau = float(u["log_tau"])
            tau = np.exp(log_tau)
            z = u["beta_c_z"]
            beta_c = u["beta_w"][None, :] + sigma * z
            # non-centered priors: standard normals, half-normal scales plus log-Jacobian
            lp = -0.5 * float(u["beta_w"] @ u["beta_w"]) - 0.5 * float(np.sum(z * z))
            lp -= 0.5 * LOG_2PI * (self.P + z.size)
            lp += float(np.sum(LOG_2 - 0.5 * LOG_2PI + u["log_sigma_beta_c"] - 0.5 * sigma ** 2))
            lp += LOG_2 - 0.5 * LOG_2PI + log_tau - 0.5 * tau ** 2
            e = expit(beta_c)
            h = TFR_FLOOR + TFR_RANGE * e
            f = np.sum(self.basis * h[self.row_c], axis=1)
            r = self.next - self.prev - f
            n = r.size
            lp += -0.5 * n * LOG_2PI - n * log_tau - 0.5 * float(r @ r) / tau ** 2
            if not np.isfinite(lp):
                return -np.inf, g
            g_f = r / tau ** 2
            g_h = np.zeros((self.C, self.P))
            np.add.at(g_h, self.row_c, g_f[:, None] * self.basis)
            g_beta = g_h * TFR_RANGE * e * (1.0 - e)
            gu["beta_w"] += np.sum(g_beta, axis=0) - u["beta_w"]
            gu["beta_c_z"] += g_beta * sigma - z
            gu["log_sigma_beta_c"] += np.sum(g_beta * z, axis=0) * sigma + 1.0 - sigma ** 2
            gu["log_tau"] += float(r @ r) / tau ** 2 - n + 1.0 - tau ** 2
        if not np.all(np.isfinite(g)):
            return -np.inf, np.zeros(self.dim)
        return float(lp), g

    def logp_and_grad(self, q):
        return self(q)

    # --- draws ----------------------------------------------------------------------

    def derived(self, draws: np.ndarray) -> dict:
        """Coefficients and scales for draws shaped (..., dim)."""
        draws = np.asarray(draws, dtype=float)
        lead = draws.shape[:-1]
        flat = draws.reshape(-1, self.dim)
        beta_w = flat[:, self.layout.index("beta_w")]
        sigma = np.exp(flat[:, self.layout.index("log_sigma_beta_c")])
        z = flat[:, self.layout.index("beta_c_z")].reshape(-1, self.C, self.P)
        beta_c = beta_w[:, None, :] + sigma[:, None, :] * z
        tau = np.exp(flat[:, self.layout.index("log_tau")[0]])
        out = {
            "beta_w": beta_w, "sigma_beta_c": sigma, "tau": tau,
            "coef": self.coefficients(beta_c),
            "coef_w": self.coefficients(beta_w),
        }
        return {k: v.reshape(lead + v.shape[1:]) for k, v in out.items()}

    def transition_curve(self, coef, omega, eta_grid):
        """f_b over ``eta_grid`` for coefficient sets (..., J) and upper levels (...)."""
        coef = np.asarray(coef)[..., None, :]
        omega = np.asarray(omega)[..., None]
        return f_bspline_vec(np.asarray(eta_grid), TFR_LOWER, omega, coef, self.ks)


def project_step(eta, f, tau, rng: np.random.Generator):
    """One projection period: ``eta + f + eps`` with eps ~ N(0, tau^2) drawn
    conditionally on the result staying at or above 1."""
    eta = np.asarray(eta, dtype=float)
    mean = eta + f
    out = np.maximum(mean, TFR_LOWER)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), mean.shape)
    noisy = tau > 0.0
    if np.any(noisy):
        a = (TFR_LOWER - mean[noisy]) / tau[noisy]
        eps = truncnorm.rvs(a, np.inf, loc=0.0, scale=tau[noisy], random_state=rng)
        out[noisy] = mean[noisy] + eps
    return np.maximum(out, TFR_LOWER)


def tfr_project(model: TfrModel, draws, end_year: int = PROJECTION_END, rng=None) -> dict:
    """Forward-simulate each country from its last Phase II value to ``end_year``.

    ``draws`` is (n, dim) or (chains, n, dim). Returns ``{country: (years,
    paths)}`` with ``paths`` shaped (n_draws, n_periods); the first column is
    the last observed value.
    """
    rng = np.random.default_rng(rng)
    d = model.derived(np.asarray(draws).reshape(-1, model.dim))
    coef, tau = d["coef"], d["tau"]
    out = {}
    for c, s in enumerate(model.series):
        last_year = int(s.phase2_years[-1])
        if end_year < last_year:
            raise ConfigError(f"projection end {end_year} precedes the data for {s.country}")
        years = np.arange(last_year, end_year + 1, PERIOD)
        paths = np.empty((coef.shape[0], years.size))
        paths[:, 0] = s.phase2[-1]
        for t in range(1, years.size):
            f = f_bspline_vec(paths[:, t - 1], TFR_LOWER, model.omega[c], coef[:, c, :], model.ks)
            paths[:, t] = project_step(paths[:, t - 1], f, tau, rng)
        out[s.country] = (years, paths)
    return out
