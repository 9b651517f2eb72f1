"""Anchor-free temporal action detection with mechanics token mixing, in numpy."""

__version__ = "0.1.0"
