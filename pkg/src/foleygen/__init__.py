"""Timbre-controllable video-to-sound generation by information disentanglement."""

__version__ = "0.1.0"
