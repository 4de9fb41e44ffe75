"""Tri-level asynchronous cross-domain CTR transfer pipeline at desk scale."""

__version__ = "0.1.0"
