"""Experiment harness: toy data, training runs, metrics reports, benchmarks and the CLI."""
