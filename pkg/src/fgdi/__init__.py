"""Prompt-guided dual-encoder re-identification harness."""

__version__ = "0.1.0"
