"""Offline model-based RL with adaptive behavioral priors."""

__version__ = "0.1.0"
