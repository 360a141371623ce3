"""Emulator for hybrid CKKS and two-party MPC transformer inference."""

from .errors import HybridLabError

__all__ = ["HybridLabError"]
