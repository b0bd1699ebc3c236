"""One-pass gradient-based optimisation of weight-update hyperparameters."""

__version__ = "0.1.0"
