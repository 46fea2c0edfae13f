"""Statistical and outlier-class detection of adversarial examples."""

__version__ = "0.1.0"
