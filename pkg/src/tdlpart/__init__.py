"""Automatic partitioning of tensor dataflow graphs across workers."""

__version__ = "0.1.0"
