"""Adversarial attacks and adversarial training for 1D convolutional time-series classifiers."""

__version__ = "0.1.0"
