"""Execution-log capture, query, lineage, replay and analysis for
interactive notebook sessions."""

__version__ = "0.1.0"
