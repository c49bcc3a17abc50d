"""Section-boundary detection for symbolic music (Standard MIDI Files)."""

__version__ = "0.1.0"
