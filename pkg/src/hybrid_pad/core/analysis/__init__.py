"""Comparison of runs across sparse-view fractions and seeds."""
