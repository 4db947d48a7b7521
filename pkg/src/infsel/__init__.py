"""Influence-guided greedy training-subset selection for empirical risk minimization."""

__version__ = "0.1.0"
