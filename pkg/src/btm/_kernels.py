"""Compiled inner loops for the mCPR process model and its adjoint.

The trajectory recursion is sequential in time, so it is written as scalar
loops and compiled with numba. The transition function is evaluated from its
piecewise-polynomial form, which avoids re-running the basis recursion at
every step. The reverse sweep is derived by hand: each forward step
``L_t = clip(L_{t-1} + f(L_{t-1}) + eps_t)`` contributes ``1 + f'`` to the
chain rule, and clamped steps block the gradient.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True, error_model="numpy")
def _interval(breaks, x):
    """Index of the knot interval holding x (the last one is closed)."""
    n = breaks.shape[0] - 1
    for i in range(n - 1):
        if x < breaks[i + 1]:
            return i
    return n - 1


@njit(cache=True, error_model="numpy")
def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def forward(omega, eps, upper, coef, breaks, poly, ref, clamp):
    """Propagate logit trajectories; keeps what the adjoint needs.

    ``poly`` is the piecewise-polynomial basis table from
    ``spline.basis_polynomials``. Returns ``(L, eta, clamped, span, pos,
    dfdx)`` where ``span``/``pos`` locate the basis argument used when
    stepping from ``L[c, s]`` and ``dfdx`` is d f / d x there (zero where
    the argument was clipped to the knot span).
    """
    C, T = eps.shape
    n_int, J, n_pow = poly.shape
    L = np.empty((C, T))
    eta = np.empty((C, T))
    clamped = np.zeros((C, T), dtype=np.bool_)
    span = np.zeros((C, T), dtype=np.int64)
    pos = np.zeros((C, T))
    dfdx = np.zeros((C, T))
    # each country's transition function as one polynomial per interval
    fp = np.zeros((C, n_int, n_pow))
    for c in range(C):
        for i in range(n_int):
            for k in range(n_pow):
                acc = 0.0
                for j in range(J):
                    acc += coef[c, j] * poly[i, j, k]
                fp[c, i, k] = acc
        L[c, ref] = omega[c]
    lo, hi = breaks[0], breaks[n_int]
    for k in range(1, max(T - 1 - ref, ref) + 1):
        for direction in range(2):
            if direction == 0:
                if ref + k >= T:
                    continue
                src, dst, sign = ref + k - 1, ref + k, 1.0
                et = ref + k
            else:
                if ref - k < 0:
                    continue
                src, dst, sign = ref - k + 1, ref - k, -1.0
                et = ref - k + 1
            for c in range(C):
                e = _expit(L[c, src])
                eta[c, src] = e
                x = e / upper[c]
                inside = True
                if x < lo:
                    x = lo
                    inside = False
                elif x > hi:
                    x = hi
                    inside = False
                i = _interval(breaks, x)
                width = breaks[i + 1] - breaks[i]
                r = (x - breaks[i]) / width
                f = fp[c, i, n_pow - 1]
                g = 0.0
                for p in range(n_pow - 2, -1, -1):
                    g = g * r + f
                    f = f * r + fp[c, i, p]
                span[c, src] = i
                pos[c, src] = r
                dfdx[c, src] = g / width if inside else 0.0
                raw = L[c, src] + sign * (f + eps[c, et])
                if raw > clamp:
                    raw = clamp
                    clamped[c, dst] = True
                elif raw < -clamp:
                    raw = -clamp
                    clamped[c, dst] = True
                L[c, dst] = raw
    for c in range(C):
        eta[c, 0] = _expit(L[c, 0])
        eta[c, T - 1] = _expit(L[c, T - 1])
    return L, eta, clamped, span, pos, dfdx


@njit(cache=True, error_model="numpy")
def loglik_grad(eta, oc, ot, oy, os2, od, sigma_d):
    """Truncated-normal log likelihood with gradients w.r.t. L and sigma_d."""
    gL = np.zeros(eta.shape)
    gsd = np.zeros(sigma_d.shape[0])
    ll = 0.0
    for i in range(oy.shape[0]):
        c, t, k = oc[i], ot[i], od[i]
        e = eta[c, t]
        sdk = sigma_d[k]
        sd = math.sqrt(os2[i] + sdk * sdk)
        r = (oy[i] - e) / sd
        a = -e / sd
        b = (1.0 - e) / sd
        # a < 0 < b, so both terms are positive and nothing cancels
        Z = 0.5 * (math.erf(b * INV_SQRT2) + math.erf(-a * INV_SQRT2))
        pa = INV_SQRT_2PI * math.exp(-0.5 * a * a)
        pb = INV_SQRT_2PI * math.exp(-0.5 * b * b)
        ll += -0.5 * LOG_2PI - math.log(sd) - 0.5 * r * r - math.log(Z)
        d_eta = r / sd - (pa - pb) / (sd * Z)
        d_sd = (r * r - 1.0) / sd - (a * pa - b * pb) / (sd * Z)
        gL[c, t] += d_eta * e * (1.0 - e)
        gsd[k] += d_sd * sdk / sd
    return ll, gL, gsd


@njit(cache=True, error_model="numpy")
def reverse(gL, eta, clamped, span, pos, dfdx, poly, upper, ref):
    """Push trajectory gradients back to (Omega_c, eps, upper, coef)."""
    C, T = eta.shape
    n_int, J, n_pow = poly.shape
    gL = gL.copy()
    g_omega = np.zeros(C)
    g_eps = np.zeros((C, T))
    g_upper = np.zeros(C)
    # moments of s**p per interval, contracted with the basis table at the end
    mom = np.zeros((C, n_int, n_pow))
    for k in range(max(T - 1 - ref, ref), 0, -1):
        if ref + k < T:
            s = ref + k
            for c in range(C):
                g = gL[c, s]
                if clamped[c, s] or g == 0.0:
                    continue
                src = s - 1
                e = eta[c, src]
                U = upper[c]
                gL[c, src] += g * (1.0 + dfdx[c, src] * e * (1.0 - e) / U)
                g_eps[c, s] += g
                g_upper[c] -= g * dfdx[c, src] * e / (U * U)
                i, r, w = span[c, src], pos[c, src], g
                for p in range(n_pow):
                    mom[c, i, p] += w
                    w *= r
        if ref - k >= 0:
            s = ref - k
            for c in range(C):
                g = gL[c, s]
                if clamped[c, s] or g == 0.0:
                    continue
                src = s + 1
                e = eta[c, src]
                U = upper[c]
                gL[c, src] += g * (1.0 - dfdx[c, src] * e * (1.0 - e) / U)
                g_eps[c, src] -= g
                g_upper[c] += g * dfdx[c, src] * e / (U * U)
                i, r, w = span[c, src], pos[c, src], -g
                for p in range(n_pow):
                    mom[c, i, p] += w
                    w *= r
    g_coef = np.zeros((C, J))
    for c in range(C):
        g_omega[c] = gL[c, ref]
        for i in range(n_int):
            for p in range(n_pow):
                m = mom[c, i, p]
                if m != 0.0:
                    for j in range(J):
                        g_coef[c, j] += m * poly[i, j, p]
    return g_omega, g_eps, g_upper, g_coef


@njit(cache=True, error_model="numpy")
def ar1_build(w, rho, ref):
    """Deviations from scaled innovations: two AR(1) chains leaving ``ref``."""
    C, T = w.shape
    eps = np.empty((C, T))
    for c in range(C):
        eps[c, ref] = w[c, ref]
        for t in range(ref + 1, T):
            eps[c, t] = rho * eps[c, t - 1] + w[c, t]
        for t in range(ref - 1, -1, -1):
            eps[c, t] = rho * eps[c, t + 1] + w[c, t]
    return eps


@njit(cache=True, error_model="numpy")
def ar1_adjoint(g_eps, eps, rho, ref):
    """Gradients of ``ar1_build`` w.r.t. the innovations and rho."""
    C, T = eps.shape
    g_w = np.empty((C, T))
    g_rho = 0.0
    acc = np.empty(T)
    for c in range(C):
        for t in range(T):
            acc[t] = g_eps[c, t]
        for t in range(T - 1, ref, -1):
            g_w[c, t] = acc[t]
            acc[t - 1] += rho * acc[t]
            g_rho += acc[t] * eps[c, t - 1]
        for t in range(0, ref):
            g_w[c, t] = acc[t]
            acc[t + 1] += rho * acc[t]
            g_rho += acc[t] * eps[c, t + 1]
        g_w[c, ref] = acc[ref]
    return g_w, g_rho
