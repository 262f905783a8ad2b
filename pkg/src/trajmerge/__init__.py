"""Iterative DPO with learned trajectory-merged reference models."""

__version__ = "0.1.0"
