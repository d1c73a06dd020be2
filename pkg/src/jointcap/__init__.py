"""Captioning over semantic graphs selected with knowledge-graph embeddings, at toy scale."""

from . import numeric  # noqa: F401  sets the float64 default

__version__ = "0.1.0"
