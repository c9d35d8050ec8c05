"""Reward-tilted fine-tuning of a discrete diffusion sampler on 2D Gaussian-mixture testbeds."""

__version__ = "0.1.0"
