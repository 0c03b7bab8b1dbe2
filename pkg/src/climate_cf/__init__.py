"""Heterogeneous climate-shock effects on household migration with honest causal forests."""

__version__ = "0.1.0"
