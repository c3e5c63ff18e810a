"""Desk-scale contrastive language-image training and evaluation for a synthetic fashion catalog."""

__version__ = "0.1.0"
