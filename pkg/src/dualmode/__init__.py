"""Dual-mode (streaming + full-context) speech encoder training recipe."""

__version__ = "0.1.0"
