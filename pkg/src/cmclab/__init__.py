"""Conditional Markov chain laboratory."""

__version__ = "0.1.0"
