"""Biquaternion multi-modal knowledge graph completion."""

__version__ = "0.1.0"
