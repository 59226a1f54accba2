"""Rank-normalized split R-hat and bulk effective sample size.

Both estimators follow Vehtari, Gelman, Simpson, Carpenter & Buerkner (2021):
chains are split in half, the pooled draws are replaced by normal scores of
their fractional ranks, and the classic statistics are computed on the
result. Input arrays are shaped ``(chains, draws)``.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


class DegenerateDrawsWarning(UserWarning):
    """Draws are constant (or non-finite); the diagnostic is undefined."""


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chains, draws)")
    return x


def _degenerate(x: np.ndarray) -> bool:
    return (not np.all(np.isfinite(x))) or np.ptp(x) == 0.0


def split_chains(x) -> np.ndarray:
    """Split each chain into two halves, dropping the middle draw if odd."""
    x = _as_chains(x)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rank_normalize(x) -> np.ndarray:
    """Normal scores of pooled fractional ranks (average ranks for ties)."""
    x = _as_chains(x)
    n = x.size
    ranks = rankdata(x, method="average").reshape(x.shape)
    return ndtri((ranks - 0.375) / (n + 0.25))


def classic_rhat(x) -> float:
    x = _as_chains(x)
    n = x.shape[1]
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    if within == 0.0:
        # every half is stuck, but not at the same value
        return float("inf")
    return float(np.sqrt((between / within + n - 1) / n))


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def ess_raw(x) -> float:
    """Effective sample size with Geyer initial-monotone truncation."""
    x = _as_chains(x)
    m, n = x.shape
    acov = autocovariance(x)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)

    rho = np.zeros(n)
    rho[0] = even = 1.0
    rho[1] = odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    # initial positive sequence over pairs (rho_{2k}, rho_{2k+1})
    t = 1
    while t < n - 3 and even + odd > 0.0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0.0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t - 2
    if even > 0.0:
        rho[max_t + 1] = even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = 0.5 * (rho[t - 1] + rho[t])
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1: max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def split_rhat(x) -> float:
    """Rank-normalized split R-hat for one parameter.

    Returns nan (with a :class:`DegenerateDrawsWarning`) for constant draws.
    """
    x = _as_chains(x)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split R-hat needs >= 2 chains of >= 4 draws")
    if _degenerate(x):
        warnings.warn("constant draws; R-hat undefined", DegenerateDrawsWarning)
        return float("nan")
    return classic_rhat(rank_normalize(split_chains(x)))


def bulk_ess(x) -> float:
    """Rank-normalized bulk ESS for one parameter."""
    x = _as_chains(x)
    if x.shape[1] < 4:
        raise ValueError("bulk ESS needs >= 4 draws per chain")
    if _degenerate(x):
        warnings.warn("constant draws; ESS undefined", DegenerateDrawsWarning)
        return float("nan")
    return ess_raw(rank_normalize(split_chains(x)))


def summarize_draws(draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-parameter (R-hat, bulk ESS) for draws shaped (chains, draws, params)."""
    k = draws.shape[-1]
    rhat = np.empty(k)
    ess = np.empty(k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDrawsWarning)
        for i in range(k):
            rhat[i] = split_rhat(draws[:, :, i])
            ess[i] = bulk_ess(draws[:, :, i])
    return rhat, ess
