"""Learnable-prompt domain generalisation for aerial object detection."""

__version__ = "0.1.0"
