"""Spatio-temporal log-Gaussian Cox process models on regular grids."""

__version__ = "0.1.0"
