"""Energy-momentum stability analysis of relative equilibria."""

__version__ = "0.1.0"
