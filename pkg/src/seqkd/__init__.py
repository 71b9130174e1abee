"""Sequential recommenders distilled from file-based teacher artifacts."""

__version__ = "0.1.0"
