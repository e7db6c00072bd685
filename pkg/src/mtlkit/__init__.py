"""Desk-scale multi-task learning toolkit: a shared convolutional trunk
jointly trained on multi-label lesion classification and single-label
body-location classification, with the matching metrics, attention,
retrieval, and ensembling machinery."""

__version__ = "0.1.0"
