"""Multimodal, multi-part motion token generation at desk scale."""

__version__ = "0.1.0"
