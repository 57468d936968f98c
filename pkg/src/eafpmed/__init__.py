"""Prompt-selected multi-scale preprocessing for medical image classifiers."""

__version__ = "0.1.0"
