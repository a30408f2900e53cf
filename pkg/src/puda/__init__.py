"""Positive-unlabeled domain adaptation: library and experiment harness."""

__version__ = "0.1.0"
