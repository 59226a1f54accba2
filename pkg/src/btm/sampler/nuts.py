"""No-U-Turn sampler with multinomial trajectory sampling and a diagonal
Euclidean metric.

The tree recursion follows the formulation in Betancourt (2017), "A
Conceptual Introduction to Hamiltonian Monte Carlo", as used by Stan: the
sample is drawn progressively across subtrees with weights exp(-H), and the
generalized U-turn criterion is checked on every merged subtree plus the two
cross-boundary extensions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import AdaptationError, InitializationError

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


@dataclass
class Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class TransitionStats:
    accept_stat: float
    treedepth: int
    n_leapfrog: int
    divergent: bool
    energy: float


class _Tree:
    """Mutable accumulators shared through one tree build."""

    __slots__ = ("n_leapfrog", "sum_metro_prob", "divergent")

    def __init__(self):
        self.n_leapfrog = 0
        self.sum_metro_prob = 0.0
        self.divergent = False


def _logaddexp(a, b):
    return np.logaddexp(a, b)


class NUTS:
    """One chain's transition kernel.

    ``target`` maps a flat parameter vector to ``(logp, grad)``. A
    non-finite ``logp`` is treated as infinite energy.
    """

    def __init__(self, target, dim, rng, step_size=1.0, inv_metric=None,
                 max_treedepth=10):
        self.target = target
        self.dim = dim
        self.rng = rng
        self.step_size = step_size
        self.inv_metric = np.ones(dim) if inv_metric is None else np.asarray(inv_metric, float)
        self.max_treedepth = max_treedepth

    # --- Hamiltonian pieces -------------------------------------------------

    def _eval(self, q):
        logp, grad = self.target(q)
        logp = float(logp)
        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.dim)
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return logp, grad

    def hamiltonian(self, z: Point) -> float:
        h = -z.logp + 0.5 * np.dot(z.p, self.inv_metric * z.p)
        return np.inf if np.isnan(h) else h

    def sample_momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def leapfrog(self, z: Point, eps: float) -> Point:
        p = z.p + 0.5 * eps * z.grad
        q = z.q + eps * self.inv_metric * p
        logp, grad = self._eval(q)
        p = p + 0.5 * eps * grad
        return Point(q, p, logp, grad)

    def point(self, q) -> Point:
        q = np.array(q, dtype=float)
        logp, grad = self._eval(q)
        return Point(q, np.zeros(self.dim), logp, grad)

    # --- step size heuristic ------------------------------------------------

    def init_step_size(self, z: Point) -> None:
        """Double or halve the step size until the one-step acceptance
        probability crosses 0.8."""
        log08 = np.log(0.8)
        z0 = Point(z.q, self.sample_momentum(), z.logp, z.grad)
        h0 = self.hamiltonian(z0)
        z1 = self.leapfrog(z0, self.step_size)
        delta = h0 - self.hamiltonian(z1)
        direction = 1 if delta > log08 else -1
        while True:
            z0 = Point(z.q, self.sample_momentum(), z.logp, z.grad)
            h0 = self.hamiltonian(z0)
            z1 = self.leapfrog(z0, self.step_size)
            delta = h0 - self.hamiltonian(z1)
            if direction == 1 and not delta > log08:
                break
            if direction == -1 and not delta < log08:
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size / 2.0
            if self.step_size > 1e7:
                raise AdaptationError("posterior appears improper; step size diverged")
            if self.step_size < 1e-12:
                raise AdaptationError("no acceptable step size found")

    # --- tree building ------------------------------------------------------

    @staticmethod
    def _uturn(p_sharp_minus, p_sharp_plus, rho):
        return np.dot(p_sharp_plus, rho) > 0.0 and np.dot(p_sharp_minus, rho) > 0.0

    def _build_tree(self, depth, z, direction, h0, tree):
        """Extend the trajectory from ``z`` by 2**depth leapfrog steps.

        Returns (valid, z_end, z_propose, log_sum_weight, rho,
        p_beg, p_sharp_beg, p_end, p_sharp_end).
        """
        if depth == 0:
            z_new = self.leapfrog(z, direction * self.step_size)
            tree.n_leapfrog += 1
            h = self.hamiltonian(z_new)
            if h - h0 > MAX_DELTA_H:
                tree.divergent = True
            log_w = h0 - h
            tree.sum_metro_prob += 1.0 if log_w > 0.0 else np.exp(log_w)
            p_sharp = self.inv_metric * z_new.p
            return (not tree.divergent, z_new, z_new, log_w, z_new.p.copy(),
                    z_new.p, p_sharp, z_new.p, p_sharp)

        (valid, z, prop_init, lsw_init, rho_init,
         p_beg, ps_beg, p_init_end, ps_init_end) = self._build_tree(depth - 1, z, direction, h0, tree)
        if not valid:
            return (False, z, prop_init, lsw_init, rho_init,
                    p_beg, ps_beg, p_init_end, ps_init_end)
        (valid, z, prop_final, lsw_final, rho_final,
         p_final_beg, ps_final_beg, p_end, ps_end) = self._build_tree(depth - 1, z, direction, h0, tree)
        if not valid:
            return (False, z, prop_final, lsw_final, rho_final,
                    p_beg, ps_beg, p_end, ps_end)

        lsw = _logaddexp(lsw_init, lsw_final)
        propose = prop_init
        if self.rng.uniform() < np.exp(lsw_final - lsw):
            propose = prop_final

        rho = rho_init + rho_final
        persist = self._uturn(ps_beg, ps_end, rho)
        persist = persist and self._uturn(ps_beg, ps_final_beg, rho_init + p_final_beg)
        persist = persist and self._uturn(ps_init_end, ps_end, rho_final + p_init_end)
        return (persist, z, propose, lsw, rho, p_beg, ps_beg, p_end, ps_end)

    def transition(self, q) -> tuple[np.ndarray, float, TransitionStats]:
        z0 = self.point(q) if not isinstance(q, Point) else q
        z0 = Point(z0.q, self.sample_momentum(), z0.logp, z0.grad)
        h0 = self.hamiltonian(z0)

        z_fwd = z_bck = z_sample = z0
        p_sharp0 = self.inv_metric * z0.p
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = z0.p
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = p_sharp0
        rho = z0.p.copy()
        log_sum_weight = 0.0
        tree = _Tree()
        depth = 0

        while depth < self.max_treedepth:
            if self.rng.uniform() > 0.5:
                # the existing tree becomes the backward half
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_fwd, ps_fwd_fwd
                (valid, z_fwd, z_prop, lsw_sub, rho_fwd,
                 p_fwd_bck, ps_fwd_bck, p_fwd_fwd, ps_fwd_fwd) = self._build_tree(
                    depth, z_fwd, 1.0, h0, tree)
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_bck, ps_bck_bck
                (valid, z_bck, z_prop, lsw_sub, rho_bck,
                 p_bck_fwd, ps_bck_fwd, p_bck_bck, ps_bck_bck) = self._build_tree(
                    depth, z_bck, -1.0, h0, tree)
            if not valid:
                break
            depth += 1

            if lsw_sub > log_sum_weight or self.rng.uniform() < np.exp(lsw_sub - log_sum_weight):
                z_sample = z_prop
            log_sum_weight = _logaddexp(log_sum_weight, lsw_sub)

            rho = rho_bck + rho_fwd
            persist = self._uturn(ps_bck_bck, ps_fwd_fwd, rho)
            persist = persist and self._uturn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            persist = persist and self._uturn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break

        accept = tree.sum_metro_prob / max(tree.n_leapfrog, 1)
        stats = TransitionStats(accept, depth, tree.n_leapfrog, tree.divergent,
                                self.hamiltonian(z_sample))
        return z_sample.q, z_sample, stats


def find_initial_point(target, dim, rng, radius=2.0, tries=100, init=None):
    """Uniform draws on [-radius, radius]^dim until the target is finite."""
    if init is not None:
        q = np.asarray(init, dtype=float)
        logp, grad = target(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return q
        raise InitializationError("supplied initial point has non-finite density")
    for _ in range(tries):
        q = rng.uniform(-radius, radius, size=dim)
        logp, grad = target(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return q
    raise InitializationError(f"no finite initial point after {tries} attempts")
