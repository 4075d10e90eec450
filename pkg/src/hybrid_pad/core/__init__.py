"""Core library: geometry, reconstruction, rendering, scoring and evaluation."""
