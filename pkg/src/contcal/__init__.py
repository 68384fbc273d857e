"""Continual learning with continual calibration.

Trains classifiers over non-stationary streams of experiences and keeps them
calibrated: temperature / vector / matrix scaling fitted after every
experience, entropy regularization during training, and replayed calibration
that carries a reservoir of past validation examples into each calibration
phase. Reports exact expected calibration error and reliability diagrams.
"""

__version__ = "0.1.0"
