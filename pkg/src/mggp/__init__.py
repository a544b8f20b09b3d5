"""Multi-gene genetic programming for symbolic regression of tabular data."""

__version__ = "0.1.0"
