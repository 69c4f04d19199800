"""Rehearsal-free incremental anomaly detection with decomposed prompts and prototype banks."""
__version__ = "0.1.0"
