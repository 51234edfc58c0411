"""Rooftop adversarial meshes against LiDAR vehicle detectors."""

__version__ = "0.1.0"
