"""Tick-synchronized highway co-simulation with an edge-assisted planning plane."""

__version__ = "0.1.0"
