"""Core utilities."""

