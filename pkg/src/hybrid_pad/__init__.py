"""Pose-agnostic anomaly detection with a hybrid SfM + Gaussian splatting scene model."""

__version__ = "0.1.0"
