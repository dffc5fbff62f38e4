"""Temporal-textual question answering: a desk-scale fusion pipeline between
multivariate time-series signals and a frozen toy language model."""

__version__ = "0.1.0"
