"""Adversarial imitation learning with absorbing-state reward shaping."""

__version__ = "0.1.0"
