"""Adaptive ad-exposure simulator and constrained two-level RL toolkit."""

__version__ = "0.1.0"
