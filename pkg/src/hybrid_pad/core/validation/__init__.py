"""Report schema validation."""
