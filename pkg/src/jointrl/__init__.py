"""Joint reinforcement learning for token policies and flow-matching generators at toy scale."""

__version__ = "0.1.0"
