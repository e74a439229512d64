"""Community-centric mobility analysis and location prediction toolkit."""

__version__ = "0.1.0"
