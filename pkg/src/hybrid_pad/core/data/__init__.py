"""Scene loading, synthetic scene generation and model bundles."""
