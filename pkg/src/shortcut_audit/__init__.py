"""Detect, categorise and occlude shortcut fields in labeled network traffic."""

__version__ = "0.1.0"
