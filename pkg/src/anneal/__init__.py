"""Annotation-cost-efficient active metric learning for content-based
retrieval: pairwise similar/dissimilar supervision, uncertainty+diversity
query selection, zero-cost transitive label expansion, and bit-level
annotation cost accounting."""

__version__ = "0.1.0"
