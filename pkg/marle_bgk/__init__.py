"""Relativistic BGK model of Marle for polyatomic gases: solver and linearised-operator analysis."""

__version__ = "0.1.0"
