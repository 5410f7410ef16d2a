"""Object counting from synthetic sorting and counting data."""

__version__ = "0.1.0"
