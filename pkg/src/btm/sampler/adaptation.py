"""Warmup adaptation: dual averaging of the step size and a windowed
diagonal mass matrix estimate."""

from __future__ import annotations

import numpy as np

from ..errors import AdaptationError


class DualAveraging:
    """Nesterov dual averaging on log step size (Hoffman & Gelman 2014).

    :param float target: target mean acceptance statistic
    """

    def __init__(self, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(1.0)

    def restart(self, step_size):
        self.mu = np.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat) -> float:
        """Feed one acceptance statistic; return the next step size."""
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        w = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - w) * self.x_bar + w * x
        return float(np.exp(x))

    def final(self) -> float:
        return float(np.exp(self.x_bar))


class WelfordVariance:
    def __init__(self, dim):
        self.dim = dim
        self.restart()

    def restart(self):
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def add(self, q):
        self.n += 1
        delta = q - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (q - self.mean)

    def regularized(self) -> np.ndarray:
        n = self.n
        var = self.m2 / (n - 1.0)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class WindowSchedule:
    """Stan's windowed warmup: fast initial buffer, doubling slow windows
    for the metric, then a fast terminal buffer."""

    def __init__(self, num_warmup, init_buffer=75, term_buffer=50, base_window=25):
        if num_warmup < 20:
            # too short for windows; adapt the step size only
            self.num_warmup = num_warmup
            self.init_buffer = num_warmup
            self.term_buffer = 0
            self.window_size = 0
            self.next_window = -1
            self.counter = 0
            return
        if init_buffer + base_window + term_buffer > num_warmup:
            init_buffer = int(0.15 * num_warmup)
            term_buffer = int(0.1 * num_warmup)
            base_window = num_warmup - (init_buffer + term_buffer)
        self.num_warmup = num_warmup
        self.init_buffer = init_buffer
        self.term_buffer = term_buffer
        self.window_size = base_window
        self.next_window = init_buffer + base_window - 1
        self.counter = 0

    def in_window(self) -> bool:
        return (self.init_buffer <= self.counter < self.num_warmup - self.term_buffer
                and self.counter != self.num_warmup)

    def window_end(self) -> bool:
        return self.counter == self.next_window and self.counter != self.num_warmup

    def _advance(self):
        last = self.num_warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last:
            if self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer:
                self.next_window = last

    def step(self) -> tuple[bool, bool]:
        """Return (collect this draw, metric update due now) and advance."""
        collect = self.in_window()
        end = self.window_end()
        if end:
            self._advance()
        self.counter += 1
        return collect, end


def check_step_size(step_size: float) -> None:
    if not np.isfinite(step_size) or step_size < 1e-12:
        raise AdaptationError(f"step size collapsed to {step_size:.3g}")
