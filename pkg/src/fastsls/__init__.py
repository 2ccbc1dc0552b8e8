"""Robust MPC by alternating a nominal QP with parallel Riccati recursions."""
__version__ = "0.1.0"
