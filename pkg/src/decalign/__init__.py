"""Decoupled multimodal representation learning with hierarchical cross-modal alignment."""

__version__ = "0.1.0"
