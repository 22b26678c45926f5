"""Joint training of a classifier and a deferral policy for selective prediction."""

__version__ = "0.1.0"
