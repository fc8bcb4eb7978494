"""Simulation toolkit for measurement-delegated QKD with photon-number purification."""

__version__ = "0.1.0"
