"""Desk-scale multi-task optimization lab: saliency regularizers, baselines, analysis."""

__version__ = "0.1.0"
