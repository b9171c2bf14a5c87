"""Filtering-guided backpropagation and region-aware CAM for weakly-supervised defect segmentation."""

__version__ = "0.1.0"
