"""Stark-controlled atomic frequency comb memory toolkit."""

__version__ = "0.1.0"
