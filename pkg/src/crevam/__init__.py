"""Correlated random-effects value-added models with nonignorable missing scores."""

__version__ = "0.1.0"
