"""Streaming test-time adaptation by anchored clustering."""

__version__ = "0.1.0"
