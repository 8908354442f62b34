"""Day-by-day dataset shift quantification for transaction data."""

__version__ = "0.1.0"
