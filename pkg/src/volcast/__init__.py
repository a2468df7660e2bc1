"""Forecasting neuronal activity directly from volumetric calcium video."""

__version__ = "0.1.0"
