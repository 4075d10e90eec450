"""Sparse reconstruction from posed references and query localization."""
