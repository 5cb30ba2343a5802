"""Hierarchical split generation, metric-learning loss kernels, and linking metrics."""

__version__ = "0.1.0"
