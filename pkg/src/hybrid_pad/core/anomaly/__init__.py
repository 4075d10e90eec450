"""Pixel and image anomaly scoring against rendered pseudo-references."""
