"""Fractional-moment localization laboratory for finite random Schrödinger operators."""

__version__ = "0.1.0"
