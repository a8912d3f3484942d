"""Robustness benchmark for taxi-fare regressors under injected noise."""

__version__ = "0.1.0"
