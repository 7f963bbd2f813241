"""Ontic-extension model of quantum mechanics: simulation library and CLI."""

__version__ = "0.3.0"
