"""Kullback proximal point generalizations of EM."""

__version__ = "0.1.0"
