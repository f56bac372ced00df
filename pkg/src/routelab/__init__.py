"""Counterfactual routing audit and router-only preference optimization for a toy MoE language model."""

__version__ = "0.1.0"
