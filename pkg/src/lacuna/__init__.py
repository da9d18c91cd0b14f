"""Lacune detection and burden quantification on co-registered T1w/FLAIR MRI."""

__version__ = "0.1.0"
