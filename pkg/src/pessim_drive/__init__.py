"""Pessimistic model-based multi-agent reinforcement learning for connected vehicles."""

__version__ = "0.1.0"
