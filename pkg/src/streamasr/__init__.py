"""Streaming seq2seq toolkit on a synthetic monotonic-alignment task."""

__version__ = "0.1.0"
