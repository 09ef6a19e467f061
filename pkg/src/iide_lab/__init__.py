"""Toy-scale latent diffusion restoration with internal detail enhancement (IIDE) fine-tuning."""

__version__ = "0.1.0"
