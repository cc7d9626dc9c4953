"""Reconstruct full projection gradients from LoRA gradients and use them to unlearn facts."""

__version__ = "0.1.0"
