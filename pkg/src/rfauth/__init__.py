"""Channel-agnostic RF-fingerprint device authentication toolkit."""

__version__ = "0.1.0"
