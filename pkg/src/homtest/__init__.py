"""Simulation and statistical certification of HOM interference between weak coherent pulses."""

__version__ = "0.1.0"
