"""Security-constrained AC optimal power flow by surrogate decomposition."""

__version__ = "0.1.0"
