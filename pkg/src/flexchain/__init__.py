"""Distribution paths, upstream-preference tensors and stress tests of
multi-tier distribution systems."""

__version__ = "0.1.0"
