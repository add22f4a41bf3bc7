"""Online multi-person pose tracking with alpha-gated dual-source attention."""

__version__ = "0.1.0"
