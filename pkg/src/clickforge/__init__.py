"""Click-driven interactive segmentation with test-time continual adaptation."""

__version__ = "0.1.0"
