"""Trainability and robustness analysis for small sensor-window classifiers."""

__version__ = "0.1.0"
