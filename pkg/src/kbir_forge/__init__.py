"""Keyphrase-oriented pre-training objectives (KBIR, KeyBART) at desk scale."""

__version__ = "0.1.0"
