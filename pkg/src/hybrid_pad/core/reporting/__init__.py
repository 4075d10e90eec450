"""Report writing: JSON, CSV mirrors, text summaries and console tables."""
