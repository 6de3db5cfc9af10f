"""Relation-sensitive correspondence reasoning for grounded image-text
matching with mismatched relations."""

__version__ = "0.1.0"
