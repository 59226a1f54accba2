"""B-spline knot sequences and Cox-de Boor basis evaluation.

The vectorized evaluators work on arrays of any shape and skip the domain
check; ``basis_eval``/``basis_deriv`` are the checked scalar entry points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

#: stand-in for an infinite boundary knot
SENTINEL = 1000.0


class BoundaryMode(str, enum.Enum):
    FINITE = "finite"
    LAST_KNOT_UNBOUNDED = "last_knot_unbounded"
    FIRST_KNOT_UNBOUNDED = "first_knot_unbounded"


@dataclass(frozen=True)
class KnotSequence:
    """Distinct knots plus degree; the extended sequence is derived."""

    interior_knots: tuple[float, ...]
    degree: int
    boundary_mode: BoundaryMode = BoundaryMode.FINITE
    extended: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.interior_knots)
        if len(knots) < 2:
            raise ConfigError("need at least two distinct knots")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ConfigError("knots must be strictly increasing")
        if self.degree < 0:
            raise ConfigError("degree must be non-negative")
        d = self.degree
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(
            self, "extended", (knots[0],) * d + knots + (knots[-1],) * d
        )

    @property
    def n_knots(self) -> int:
        return len(self.interior_knots)

    @property
    def n_basis(self) -> int:
        """J = K + d - 1."""
        return self.n_knots + self.degree - 1

    @property
    def lower(self) -> float:
        return self.interior_knots[0]

    @property
    def upper(self) -> float:
        return self.interior_knots[-1]

    def support(self, j: int) -> tuple[float, float]:
        """Support interval of basis ``j`` (0-based) in knot units."""
        t = self.extended
        return t[j], t[j + self.degree + 1]


def _check_knot_args(K: int, d: int) -> None:
    if K < 3:
        raise ConfigError(f"need K >= 3 knots, got {K}")
    if d < 1:
        raise ConfigError(f"need degree d >= 1, got {d}")


def build_knots_mcpr(K: int, d: int) -> KnotSequence:
    """K-1 knots evenly spaced on [0, 1] followed by a +inf (sentinel) knot."""
    _check_knot_args(K, d)
    knots = tuple(np.linspace(0.0, 1.0, K - 1)) + (SENTINEL,)
    return KnotSequence(knots, d, BoundaryMode.LAST_KNOT_UNBOUNDED)


def build_knots_tfr(K: int, d: int) -> KnotSequence:
    """A -inf (sentinel) knot followed by K-1 knots evenly spaced on [0, 1]."""
    _check_knot_args(K, d)
    knots = (-SENTINEL,) + tuple(np.linspace(0.0, 1.0, K - 1))
    return KnotSequence(knots, d, BoundaryMode.FIRST_KNOT_UNBOUNDED)


def _check_domain(ks: KnotSequence, x) -> None:
    x = np.asarray(x)
    if np.any(~np.isfinite(x)) or np.any(x < ks.lower) or np.any(x > ks.upper):
        raise DomainError(
            f"argument outside knot span [{ks.lower}, {ks.upper}]"
        )


def _degree0(t, x):
    # half-open [t_i, t_{i+1}); the last non-empty interval is closed on the right
    m = len(t)
    last = max(i for i in range(m - 1) if t[i + 1] > t[i])
    cols = []
    for i in range(m - 1):
        if t[i + 1] <= t[i]:
            cols.append(np.zeros_like(x))
            continue
        if i == last:
            inside = (x >= t[i]) & (x <= t[i + 1])
        else:
            inside = (x >= t[i]) & (x < t[i + 1])
        cols.append(np.where(inside, 1.0, 0.0))
    return cols


def _raise_degree(t, x, lower, k):
    out = []
    for i in range(len(lower) - 1):
        left = t[i + k] - t[i]
        right = t[i + k + 1] - t[i + 1]
        term = np.zeros_like(x)
        if left > 0:
            term = term + (x - t[i]) / left * lower[i]
        if right > 0:
            term = term + (t[i + k + 1] - x) / right * lower[i + 1]
        out.append(term)
    return out


def _basis_columns(ks: KnotSequence, x, degree: int):
    t = ks.extended
    cols = _degree0(t, x)
    for k in range(1, degree + 1):
        cols = _raise_degree(t, x, cols, k)
    return cols


def basis_matrix(ks: KnotSequence, x):
    """Evaluate all J bases at ``x``; returns shape ``x.shape + (J,)``."""
    x = np.asarray(x, dtype=float)
    cols = _basis_columns(ks, x, ks.degree)
    # degree-0 columns of degenerate intervals are dropped by the recursion;
    # for d = 0 the sequence has no repeats, so every column is a basis
    return np.stack(cols, axis=-1)


def basis_deriv_matrix(ks: KnotSequence, x):
    """Derivatives of all J bases at ``x``; shape ``x.shape + (J,)``."""
    x = np.asarray(x, dtype=float)
    d = ks.degree
    if d == 0:
        return np.zeros(x.shape + (ks.n_basis,))
    t = ks.extended
    lower = _basis_columns(ks, x, d - 1)
    cols = []
    for i in range(len(lower) - 1):
        left = t[i + d] - t[i]
        right = t[i + d + 1] - t[i + 1]
        term = np.zeros_like(x)
        if left > 0:
            term = term + d / left * lower[i]
        if right > 0:
            term = term - d / right * lower[i + 1]
        cols.append(term)
    return np.stack(cols, axis=-1)


def basis_eval(ks: KnotSequence, x: float) -> np.ndarray:
    """Values of the J basis functions at a scalar ``x`` within the knot span."""
    _check_domain(ks, x)
    return basis_matrix(ks, float(x))


def basis_deriv(ks: KnotSequence, x: float) -> np.ndarray:
    """Derivatives of the J basis functions at a scalar ``x``."""
    _check_domain(ks, x)
    return basis_deriv_matrix(ks, float(x))


def basis_argmax(ks: KnotSequence, j: int, lo: float = 0.0, hi: float = 1.0,
                 tol: float = 1e-10) -> float:
    """Location of the maximum of basis ``j`` over its support within [lo, hi].

    Golden-section search; B-spline bases of degree >= 1 are unimodal.
    """
    a, b = ks.support(j)
    a, b = max(a, lo), min(b, hi)
    if b < a:
        raise DomainError(f"basis {j} has no support inside [{lo}, {hi}]")

    def value(x):
        return basis_matrix(ks, x)[j]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = value(c), value(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = value(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = value(d)
    x = 0.5 * (a + b)
    # maxima sitting on the clipped boundary
    lo_edge, hi_edge = max(ks.support(j)[0], lo), min(ks.support(j)[1], hi)
    best = max((value(lo_edge), lo_edge), (value(x), x), (value(hi_edge), hi_edge))
    return best[1]


def basis_polynomials(ks: KnotSequence):
    """Piecewise-polynomial form of all bases, one polynomial per knot interval.

    Returns ``(breaks, coef)`` where ``coef[i, j, k]`` multiplies ``s**k`` for
    basis ``j`` on ``[breaks[i], breaks[i+1]]`` and ``s`` is the position
    rescaled to [0, 1] within that interval. Each piece is interpolated from
    the recursion at d + 1 interior points, which is exact up to rounding.
    """
    breaks = np.asarray(ks.interior_knots, dtype=float)
    d = ks.degree
    s = (np.arange(d + 1) + 0.5) / (d + 1)
    V = np.vander(s, d + 1, increasing=True)
    out = np.empty((len(breaks) - 1, ks.n_basis, d + 1))
    for i in range(len(breaks) - 1):
        a, b = breaks[i], breaks[i + 1]
        vals = basis_matrix(ks, a + s * (b - a))
        out[i] = np.linalg.solve(V, vals).T
    return breaks, out
