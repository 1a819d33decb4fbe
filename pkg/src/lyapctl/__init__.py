"""Lyapunov-certified one-step-ahead predictive control and its neural-network imitation."""

__version__ = "0.1.0"
