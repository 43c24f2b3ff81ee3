"""Ruin probabilities for a transient Cramér-Lundberg portfolio with finitely many obligors."""
__version__ = "0.1.0"
