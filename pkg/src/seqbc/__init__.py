"""Sequence-model behavior cloning toolkit."""

__version__ = "0.1.0"
