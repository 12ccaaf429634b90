"""Quadruply robust estimation of the cross-world mediation mean E[Y(1, M(0))]."""

__version__ = "0.1.0"
