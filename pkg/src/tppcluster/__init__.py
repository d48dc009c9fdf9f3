"""Clustering of temporal point-process sequences with a mixture of imitation-learned policies."""

__version__ = "0.1.0"
