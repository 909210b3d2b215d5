"""Graph reasoning and cross-taxonomy transfer for multi-granularity parsing."""

__version__ = "0.1.0"
