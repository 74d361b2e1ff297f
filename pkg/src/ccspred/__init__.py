"""Concrete compressive-strength prediction: five regressors, one comparison harness."""

__version__ = "0.1.0"
