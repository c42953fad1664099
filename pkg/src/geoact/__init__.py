"""Offline activity inference from anonymized check-in data."""

from geoact.activities import ACTIVITIES, N_CLASSES

__version__ = "0.1.0"

__all__ = ["ACTIVITIES", "N_CLASSES", "__version__"]
