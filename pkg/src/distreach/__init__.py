"""Synchronous distributed PPO on kinematic reacher arms."""

__version__ = "0.1.0"
