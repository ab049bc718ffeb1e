"""Cosmic-ray correlated qubit error toolkit: muon Monte Carlo, geometry,
synthetic qubit/detector streams, burst detection, coincidence statistics,
detector calibration and rate algebra."""

__version__ = "0.1.0"
