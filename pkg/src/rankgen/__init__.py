"""Ranking-driven adversarial training for discrete sequence generators."""

__version__ = "0.1.0"
