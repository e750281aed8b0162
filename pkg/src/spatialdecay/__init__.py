"""Data-dependent 2D spatial decay attention: library and training harness."""

__version__ = "0.1.0"
