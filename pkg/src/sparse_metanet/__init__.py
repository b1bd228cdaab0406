"""Sparse fast-weight meta-networks for online sequential adaptation."""

__version__ = "0.1.0"
