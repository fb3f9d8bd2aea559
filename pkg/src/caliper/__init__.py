"""Continuous authentication with vaulted key release."""

__version__ = "0.1.0"
