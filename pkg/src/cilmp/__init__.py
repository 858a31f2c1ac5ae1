"""Conditional low-rank intervention prompt tuning on a toy dual encoder."""

__version__ = "0.1.0"
