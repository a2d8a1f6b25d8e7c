"""Change detection on longitudinal glioma difference maps with weak labels."""

__version__ = "0.1.0"
