"""Sequential design of GP surrogates for Bayesian inverse problems."""

__version__ = "0.1.0"
