"""Desk-scale condition-guided domain adaptation lab for semantic segmentation."""

__version__ = "0.1.0"
