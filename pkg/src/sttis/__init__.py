"""Spatial-temporal traffic forecasting with sampled region graphs."""

__version__ = "0.1.0"
