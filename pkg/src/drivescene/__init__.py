"""Desk-scale toolkit for driving-scene multimodal model optimization."""

__version__ = "0.1.0"
