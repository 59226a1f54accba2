"""Gradient-based MCMC: NUTS, warmup adaptation, convergence diagnostics."""

from .diagnostics import bulk_ess, split_rhat, summarize_draws
from .nuts import NUTS
from .run import ChainDiagnostics, SampleResult, SamplerConfig, nuts_sample

__all__ = [
    "NUTS",
    "ChainDiagnostics",
    "SampleResult",
    "SamplerConfig",
    "bulk_ess",
    "nuts_sample",
    "split_rhat",
    "summarize_draws",
]
