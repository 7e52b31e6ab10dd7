"""Few-shot temporal activity detection at feature level."""

__version__ = "0.1.0"
