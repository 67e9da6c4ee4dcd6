"""Metric-learning HD-EMG gesture recognition with confidence-based rejection."""

__version__ = "0.1.0"
