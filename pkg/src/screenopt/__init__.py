"""Screening designs built for two-stage inference."""

__version__ = "0.1.0"
