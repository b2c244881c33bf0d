"""Synthetic data, configuration, experiment runners and the command-line interface."""
