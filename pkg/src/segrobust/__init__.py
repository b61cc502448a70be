"""Robustness evaluation and adversarial training for toy segmentation models."""

__version__ = "0.1.0"
