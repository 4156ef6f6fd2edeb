"""Self-configuring cloud segmentation for multispectral satellite imagery."""

__version__ = "0.1.0"
