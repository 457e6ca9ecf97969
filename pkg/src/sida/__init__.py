"""Adversarial score identity distillation on analytic toy teachers."""

__version__ = "0.1.0"
