"""Two-stage controllable image pipeline: prompt -> G-buffer -> image."""

__version__ = "0.1.0"
