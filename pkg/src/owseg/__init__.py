"""Open-world instance segmentation with category-level prompt supervision."""

__version__ = "0.1.0"
