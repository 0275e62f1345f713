"""Dissect catastrophic forgetting per conv block and mitigate it by
freezing the blocks upstream of the most plastic one."""

__version__ = "0.1.0"
