"""Bulk-synchronous parallel peptide database search."""

__version__ = "0.1.0"
