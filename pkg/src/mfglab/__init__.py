"""Finite N-player partially observed mean-field games: exact solvers,
independent learners and satisficing-path analysis."""

__version__ = "0.1.0"
