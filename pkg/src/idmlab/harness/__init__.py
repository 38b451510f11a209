"""Experiment configuration, orchestration, metrics and plotting."""
