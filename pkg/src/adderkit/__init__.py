"""Adder filters, fusion necks, energy accounting and a small numpy trainer."""

__version__ = "0.1.0"
