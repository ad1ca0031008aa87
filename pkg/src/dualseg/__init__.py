"""Semi-supervised dual-modal (point cloud + image) semantic segmentation in numpy."""

__version__ = "0.1.0"
