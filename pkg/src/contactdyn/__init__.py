"""Contact-aware neural forward dynamics for intermittent hand-object contact."""

__version__ = "0.1.0"
