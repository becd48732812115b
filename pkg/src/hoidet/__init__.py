"""Desk-scale set-prediction HOI detector with hard-positive query training."""

__version__ = "0.1.0"
