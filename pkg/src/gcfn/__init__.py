"""Counterfactually fair classification with generated counterfactual mediators."""

__version__ = "0.1.0"
