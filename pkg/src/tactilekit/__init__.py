"""Curved optical-tactile fingertip: simulation, calibration, reconstruction and control."""

__version__ = "0.1.0"
