"""Occlusion sweeps in a host framework, exported for the block dissector."""

__version__ = "0.1.0"
