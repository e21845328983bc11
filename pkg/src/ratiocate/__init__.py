"""Ratio-scale conditional treatment effects: contrast regression, calibrated
two-regression, validation curves and a restricted-mean-time-lost extension."""

__version__ = "0.1.0"
