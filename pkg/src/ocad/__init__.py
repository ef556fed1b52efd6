"""One-class anomaly detection for oculomotor fixation slice images."""

__version__ = "0.1.0"
