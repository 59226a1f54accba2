"""Flat parameter vectors and shared density helpers."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


class ParamLayout:
    """Named blocks laid out contiguously in one flat vector."""

    def __init__(self, blocks):
        self.blocks = {}
        offset = 0
        for name, shape in blocks:
            shape = tuple(shape)
            size = int(np.prod(shape)) if shape else 1
            self.blocks[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset

    def unpack(self, flat) -> dict:
        return {name: flat[sl].reshape(shape) for name, (sl, shape) in self.blocks.items()}

    def pack(self, values: dict) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, (sl, shape) in self.blocks.items():
            flat[sl] = np.asarray(values[name], dtype=float).reshape(-1)
        return flat

    def names(self) -> list[str]:
        out = []
        for name, (sl, shape) in self.blocks.items():
            if not shape:
                out.append(name)
                continue
            for idx in np.ndindex(*shape):
                out.append(f"{name}[{','.join(str(i) for i in idx)}]")
        return out

    def index(self, name: str) -> np.ndarray:
        sl, _ = self.blocks[name]
        return np.arange(sl.start, sl.stop)


def norm_lpdf(x, mu, sd):
    z = (x - mu) / sd
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z


def halfnorm_lpdf(x, sd):
    """Half-normal N+(0, sd^2); -inf for negative ``x``."""
    val = LOG_2 + norm_lpdf(x, 0.0, sd)
    return np.where(np.asarray(x) >= 0.0, val, -np.inf)


def truncnorm_lpdf(y, mu, sd, lower=0.0, upper=1.0):
    """Normal log density truncated to [lower, upper]."""
    z = ndtr((upper - mu) / sd) - ndtr((lower - mu) / sd)
    val = norm_lpdf(y, mu, sd) - np.log(z)
    return np.where((y >= lower) & (y <= upper), val, -np.inf)
