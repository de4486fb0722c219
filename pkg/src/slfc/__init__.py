"""Switching latent feedback controllers for skill acquisition from demonstrations."""

__version__ = "0.1.0"
