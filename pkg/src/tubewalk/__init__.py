"""Footstep planning over uncertain terrain with conformal height bounds and contraction-based tube tracking."""

__version__ = "0.1.0"
