"""Agentic trajectory generation, validation and evaluation toolkit."""

__version__ = "0.1.0"
