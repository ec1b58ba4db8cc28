"""Collaborative mixture-of-experts text classification on a shared encoder."""
__version__ = "0.1.0"
