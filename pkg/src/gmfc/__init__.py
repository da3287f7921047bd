"""Graphon mean field control: simulation, Pontryagin FBSDE solver and convergence experiments."""

__version__ = "0.1.0"
