"""Foreground object search: retrieve foregrounds compatible with a background and a query rectangle."""

__version__ = "0.1.0"
