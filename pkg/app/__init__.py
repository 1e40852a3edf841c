"""App package root."""

