"""Staged preparation of multi-site OMOP CDM tables for ICU prediction tasks."""

__version__ = "0.1.0"
