"""Generative attention for sequential recommendation."""

from .model import GenAttModel, ModelConfig

__all__ = ["GenAttModel", "ModelConfig"]
__version__ = "0.1.0"
