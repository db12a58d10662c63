"""Call-detail-record analytics for spatial HIV prevalence modelling."""

__version__ = "0.1.0"
