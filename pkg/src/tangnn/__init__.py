"""Graph representation learning with fused neighborhood aggregation and
Top-m attention over an auxiliary-vector rank window."""

__version__ = "0.1.0"
