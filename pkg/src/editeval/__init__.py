"""Evaluation harness for instruction-based image editing built on difference detection and coherence judgments."""

__version__ = "0.1.0"
