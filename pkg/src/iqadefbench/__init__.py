"""Benchmark of adversarial defenses for no-reference image quality metrics."""

__version__ = "0.1.0"
