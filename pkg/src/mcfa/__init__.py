"""Cascaded multi-task CNN for facial attribute classification, on a small numpy autodiff engine."""

__version__ = "0.1.0"
