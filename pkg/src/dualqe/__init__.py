"""Translation quality estimation with a dual-learning mixture-of-experts predictor."""

__version__ = "0.1.0"
