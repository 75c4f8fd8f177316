"""Data-driven synthesis of neural incremental-stability certificates and
safe controllers for black-box plants."""

__version__ = "0.1.0"
