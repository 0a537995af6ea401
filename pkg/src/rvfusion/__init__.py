"""Radar-vision fusion detection toolkit (RV-PAFCOS at desk scale)."""

__version__ = "0.1.0"
