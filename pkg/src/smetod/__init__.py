"""Soft-MoE encoder-decoder models for synthetic task-oriented dialogue."""

__version__ = "0.1.0"
