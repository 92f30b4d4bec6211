"""Per-application GPS privatization daemon and analyst toolkit."""

__version__ = "0.1.0"
