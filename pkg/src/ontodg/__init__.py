"""Hierarchy-guided latent domain discovery and domain generalization for EHR sequences."""

__version__ = "0.1.0"
