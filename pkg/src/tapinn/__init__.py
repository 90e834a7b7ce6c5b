"""Topology-aware PINN training on the forced Duffing oscillator."""

__version__ = "0.1.0"
