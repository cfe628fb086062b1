"""Optimal population-inversion pulses for NV-center electron spins, simulated beyond the RWA."""

__version__ = "0.1.0"
