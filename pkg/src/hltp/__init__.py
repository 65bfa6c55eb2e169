"""Teacher-student vehicle trajectory forecasting."""

__version__ = "0.1.0"
