"""Learned trajectory planning with CBF safety corrections for a kinematic bicycle."""

__version__ = "0.1.0"
