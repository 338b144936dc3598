"""Spike-variation calculus for controlled forward stochastic Volterra integral equations."""

__version__ = "0.1.0"
