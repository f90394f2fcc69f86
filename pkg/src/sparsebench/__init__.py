"""Benchmark engine for regression on large, sparse, mixed-type tabular data."""

__version__ = "0.1.0"
