"""Simulation and verification tools for a switching-slit Fermi accelerator."""
__version__ = "0.1.0"
