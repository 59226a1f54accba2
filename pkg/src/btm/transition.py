"""Transition functions: rate of change of an indicator as a function of level.

Four families are provided: the B-spline transition function (the model's
workhorse), the logistic and double-logistic parametric forms, and the
B-spline approximation of the logistic form. Public evaluators take scalars
and check their domain; the ``*_vec`` variants are vectorized and unchecked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .spline import KnotSequence, basis_argmax, basis_deriv_matrix, basis_matrix

MCPR_FLOOR = 0.01
MCPR_RANGE = 0.29
TFR_FLOOR = -0.01
TFR_RANGE = -2.49
LN9 = np.log(9.0)


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    return np.log(p) - np.log1p(-p)


class CoefficientFamily(str, enum.Enum):
    MCPR = "mcpr_constraints"
    TFR = "tfr_constraints"
    APPROX_LOGISTIC = "approx_logistic"


@dataclass(frozen=True)
class AsymptotePair:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ConfigError("upper asymptote must exceed the lower one")


def n_free_mcpr(ks: KnotSequence) -> int:
    """Number of unconstrained coefficients (J - d - 1) under mCPR constraints."""
    return ks.n_basis - ks.degree - 1


def n_free_tfr(ks: KnotSequence) -> int:
    """Middle coefficients (J - 2(d + 1)) that are free under TFR constraints."""
    n = ks.n_basis - 2 * (ks.degree + 1)
    if n < 1:
        raise ConfigError("too few knots for the TFR coefficient constraints")
    return n


def constrain_mcpr(raw, ks: KnotSequence):
    """Map raw coefficients to [0.01, 0.3], padding the final d+1 with zeros.

    ``raw`` has trailing dimension J - d - 1 (or J, in which case the final
    d + 1 raw entries are ignored).
    """
    p = n_free_mcpr(ks)
    raw = np.asarray(raw)[..., :p]
    head = MCPR_FLOOR + MCPR_RANGE * expit(raw)
    tail = np.zeros(raw.shape[:-1] + (ks.degree + 1,))
    return np.concatenate([head, tail], axis=-1)


def constrain_tfr(raw, ks: KnotSequence):
    """Map raw coefficients to [-2.5, -0.01] with d+1 zeros at each end."""
    p = n_free_tfr(ks)
    raw = np.asarray(raw)
    if raw.shape[-1] == ks.n_basis:
        raw = raw[..., ks.degree + 1: ks.degree + 1 + p]
    mid = TFR_FLOOR + TFR_RANGE * expit(raw)
    pad = np.zeros(raw.shape[:-1] + (ks.degree + 1,))
    return np.concatenate([pad, mid, pad], axis=-1)


@dataclass(frozen=True)
class SplineCoefficients:
    raw: np.ndarray | None
    constrained: np.ndarray
    family: CoefficientFamily

    @classmethod
    def from_raw(cls, raw, ks: KnotSequence, family="mcpr_constraints"):
        family = CoefficientFamily(family)
        raw = np.asarray(raw, dtype=float)
        if family is CoefficientFamily.MCPR:
            h = constrain_mcpr(raw, ks)
        elif family is CoefficientFamily.TFR:
            h = constrain_tfr(raw, ks)
        else:
            raise ConfigError("approximate-logistic coefficients are not raw-parameterized")
        return cls(raw, h, family)

    @classmethod
    def fixed(cls, constrained, family="mcpr_constraints"):
        return cls(None, np.asarray(constrained, dtype=float), CoefficientFamily(family))


def f_bspline_vec(eta, lower, upper, coef, ks: KnotSequence):
    """Vectorized B-spline transition function.

    ``coef`` has trailing dimension J and broadcasts against ``eta``. The
    scaled argument is clipped to the knot span; with zero boundary
    coefficients this extends the function by its boundary value.
    """
    x = (eta - lower) / (upper - lower)
    x = np.clip(x, ks.lower, ks.upper)
    return np.sum(basis_matrix(ks, x) * coef, axis=-1)


def f_bspline_deta_vec(eta, lower, upper, coef, ks: KnotSequence):
    x = (eta - lower) / (upper - lower)
    inside = (x >= ks.lower) & (x <= ks.upper)
    x = np.clip(x, ks.lower, ks.upper)
    d = np.sum(basis_deriv_matrix(ks, x) * coef, axis=-1) / (upper - lower)
    return np.where(inside, d, 0.0)


def _coef(beta) -> np.ndarray:
    if isinstance(beta, SplineCoefficients):
        return beta.constrained
    return np.asarray(beta, dtype=float)


def _scaled(eta, lam: AsymptotePair, ks: KnotSequence) -> float:
    x = (eta - lam.lower) / (lam.upper - lam.lower)
    if not (ks.lower <= x <= ks.upper):
        raise DomainError(f"scaled level {x} outside knot span [{ks.lower}, {ks.upper}]")
    return x


def f_bspline(eta: float, lam: AsymptotePair, beta, ks: KnotSequence) -> float:
    """Sum_j h_j(beta_j) B_j((eta - lower) / (upper - lower))."""
    _scaled(eta, lam, ks)
    return float(f_bspline_vec(float(eta), lam.lower, lam.upper, _coef(beta), ks))


def f_logistic(eta: float, upper: float, omega: float) -> float:
    """Logit-scale one-step change of logistic growth towards ``upper``."""
    if not 0.0 < eta < 1.0:
        raise DomainError("logistic transition needs 0 < eta < 1")
    if not 0.0 < upper < 1.0 or omega < 0.0:
        raise DomainError("need 0 < upper < 1 and omega >= 0")
    if eta >= upper:
        return 0.0
    step = expit(logit(eta / upper) + omega)
    # the exact change is >= 0; clip rounding noise at omega ~ 0
    return max(float(logit(upper * step) - logit(eta)), 0.0)


def f_double_logistic(eta: float, d_c: float, deltas) -> float:
    """Five-parameter double-logistic TFR decrement, as a positive amount per period."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.shape != (4,) or np.any(deltas <= 0.0) or d_c <= 0.0:
        raise DomainError("d_c and all four deltas must be positive")
    if eta <= 1.0:
        return 0.0
    d1, _, d3, d4 = deltas
    first = -d_c / (1.0 + np.exp(-2.0 * LN9 / d1 * (eta - deltas.sum() + 0.5 * d1)))
    second = d_c / (1.0 + np.exp(-2.0 * LN9 / d3 * (eta - d4 - 0.5 * d3)))
    return float(first + second)


def rate_logistic(x, upper, omega):
    """Continuous logit-scale growth rate of a logistic curve at level ``x``."""
    return (x - upper) * omega / (upper * (x - 1.0))


def basis_peaks(ks: KnotSequence, n: int | None = None) -> np.ndarray:
    """Argmax over [0, 1] of the first ``n`` bases (default J - d - 1)."""
    n = n_free_mcpr(ks) if n is None else n
    return np.array([basis_argmax(ks, j, 0.0, 1.0) for j in range(n)])


def approx_logistic_coefficients_vec(upper, omega, peaks, ks: KnotSequence):
    """Coefficients following the logistic rate at each basis peak.

    ``peaks`` are basis maxima on the scaled axis; the basis evaluates at
    eta / upper, so the matching level is peak * upper.
    """
    upper = np.asarray(upper)[..., None]
    omega = np.asarray(omega)[..., None]
    head = rate_logistic(peaks * upper, upper, omega)
    tail = np.zeros(head.shape[:-1] + (ks.degree + 1,))
    return np.concatenate([head, tail], axis=-1)


def approx_logistic_coefficients(upper: float, omega: float,
                                 ks: KnotSequence) -> SplineCoefficients:
    peaks = basis_peaks(ks)
    if np.any(np.isclose(peaks, 1.0)):
        raise DomainError("a constrained basis peaks at the upper boundary")
    h = approx_logistic_coefficients_vec(upper, omega, peaks, ks)
    return SplineCoefficients.fixed(h, CoefficientFamily.APPROX_LOGISTIC)


def f_deriv_eta(family: str, eta: float, **params) -> float:
    """d f / d eta for ``family`` in {"bspline", "logistic", "double_logistic"}."""
    if family == "bspline":
        lam, ks = params["lam"], params["ks"]
        x = _scaled(eta, lam, ks)
        del x
        return float(f_bspline_deta_vec(float(eta), lam.lower, lam.upper,
                                       _coef(params["beta"]), ks))
    if family == "logistic":
        upper, omega = params["upper"], params["omega"]
        f_logistic(eta, upper, omega)
        if eta >= upper:
            return 0.0
        p = eta / upper
        q = expit(logit(p) + omega)
        g = upper * q
        return float(q * (1 - q) / (p * (1 - p) * g * (1 - g)) - 1.0 / (eta * (1 - eta)))
    if family == "double_logistic":
        d_c, deltas = params["d_c"], np.asarray(params["deltas"], dtype=float)
        f_double_logistic(eta, d_c, deltas)
        if eta <= 1.0:
            return 0.0
        d1, _, d3, d4 = deltas
        a1, a3 = 2.0 * LN9 / d1, 2.0 * LN9 / d3
        s1 = expit(a1 * (eta - deltas.sum() + 0.5 * d1))
        s3 = expit(a3 * (eta - d4 - 0.5 * d3))
        return float(-d_c * a1 * s1 * (1 - s1) + d_c * a3 * s3 * (1 - s3))
    raise ConfigError(f"unknown transition family {family!r}")
