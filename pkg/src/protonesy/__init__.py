"""Prototypical concept extractors trained with semantic loss, and tools for counting reasoning shortcuts."""

__version__ = "0.1.0"
