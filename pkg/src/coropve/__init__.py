"""Partial-volume-aware coronary lumen segmentation and lumped-parameter FFR."""

__version__ = "0.1.0"
