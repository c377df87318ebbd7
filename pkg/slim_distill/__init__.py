"""Sparse training, channel pruning and channel-wise distillation."""

__version__ = "0.1.0"
