"""Semi-supervised segmentation via self-aware and cross-sample prototypical consistency."""

__version__ = "0.1.0"
