"""Continual test-time adaptation of a frozen classifier through additive image prompts."""

__version__ = "0.1.0"
