"""Random change-point segmented NLME models fitted by stochastic EM."""

__version__ = "0.1.0"
