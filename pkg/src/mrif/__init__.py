"""Multi-resolution interest fusion recommender in numpy."""

__version__ = "0.1.0"
