"""Grammar-constrained discovery of ordinary differential equations."""

__version__ = "0.1.0"
