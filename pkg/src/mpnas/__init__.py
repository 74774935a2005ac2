"""Multi-path architecture search over a weight-sharing super-network, on numpy."""

__version__ = "0.1.0"
