"""Bayesian copula density deconvolution for zero-inflated dietary recalls."""

__version__ = "0.1.0"
