"""Quantile forecasting of safety metrics with a runtime violation monitor."""

__version__ = "0.1.0"
