"""Continual indexing for differentiable search indices at desk scale."""

__version__ = "0.1.0"
