"""GeoTIFF patch archives (38-Cloud, OCN) to CSEG tensors + manifest."""

__version__ = "0.1.0"
