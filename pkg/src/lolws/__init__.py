"""Losses-over-labels weak supervision: heuristics turned directly into training losses."""

__version__ = "0.1.0"

ABSTAIN = -1
