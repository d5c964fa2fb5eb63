"""Blockchain and market data to windowed ML datasets, with baseline predictors."""

__version__ = "0.1.0"
