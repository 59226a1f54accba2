"""B-spline transition models for demographic indicators."""

__version__ = "0.1.0"
