"""All-in-one image restoration: library, toy training loop, and CLI."""

__version__ = "0.1.0"
