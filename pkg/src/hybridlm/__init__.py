"""Hybrid diffusion-planner / autoregressive-executor language models at desk scale."""

__version__ = "0.1.0"
