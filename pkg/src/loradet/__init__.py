"""Low-rank adaptation toolkit for a toy oriented object detector."""

__version__ = "0.1.0"
