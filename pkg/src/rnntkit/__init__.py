"""Desk-scale neural transducer training and decoding toolkit."""

__version__ = "0.1.0"
