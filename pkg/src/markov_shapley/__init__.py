"""Exact and tabular Shapley-value tools for cooperative multi-agent RL."""
__version__ = "0.1.0"
