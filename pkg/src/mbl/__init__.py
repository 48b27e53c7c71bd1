"""Multi-timescale bootstrapped representation learning for behavioral time series."""

__version__ = "0.1.0"
