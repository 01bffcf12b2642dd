"""Streaming speech translation with glossary retrieval over sliding audio windows."""

__version__ = "0.1.0"
