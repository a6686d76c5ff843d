"""Multitask latent world model with MPPI planning, in numpy."""

__version__ = "0.1.0"
