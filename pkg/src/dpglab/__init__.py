"""Toy-scale laboratory for reward maximization and distribution matching with exact oracles."""

__version__ = "0.1.0"
