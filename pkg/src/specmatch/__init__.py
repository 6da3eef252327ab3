"""One-shot spectrum matching with a Siamese 1-D CNN."""

__version__ = "0.1.0"
