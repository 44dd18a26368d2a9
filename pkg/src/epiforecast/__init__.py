"""Covid-19 case forecasting from NPI, cultural and SIR-derived features."""

__version__ = "0.1.0"
