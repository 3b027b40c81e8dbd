"""Model-backed scoring server speaking the gateau line protocol."""

__version__ = "0.1.0"
