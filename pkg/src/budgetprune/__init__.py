"""Budget-aware channel pruning for multi-domain convolutional networks."""

__version__ = "0.1.0"
