"""
CDASR: semantic-aligned super-resolution with few-shot domain adaptation.
"""

__version__ = "0.1.0"
