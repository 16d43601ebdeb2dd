"""Unrolled layer-wise relevance propagation as a tied-weight segmentation network."""

__version__ = "0.1.0"
