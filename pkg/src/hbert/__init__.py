"""Hierarchical code decomposition with a graph-attention + transformer encoder for EHR visits."""

__version__ = "0.1.0"
