"""Boundary-traversal adversarial attacks and per-example transferability measurement."""
__version__ = "0.1.0"
