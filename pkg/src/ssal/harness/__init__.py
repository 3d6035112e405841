"""Dataset I/O, synthetic data, configuration, metrics and the CLI."""
