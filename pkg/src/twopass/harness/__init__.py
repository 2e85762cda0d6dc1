"""Evaluation, endpointing baselines, sweeps and the command-line entry point."""
