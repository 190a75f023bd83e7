"""Health-indicator curve forecasting by generative scenario matching."""

__version__ = "0.1.0"
