"""SLA-constrained cellular traffic forecasting with LSTMs and an asymmetric loss."""

__version__ = "0.1.0"
