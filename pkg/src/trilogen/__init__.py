"""Reward-driven prompt optimisation for procedurally rendered trilobite videos."""

__version__ = "0.1.0"
