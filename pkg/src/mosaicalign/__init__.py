"""Region-text contrastive learning on mosaicked canvases."""

__version__ = "0.1.0"
