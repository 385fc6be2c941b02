"""Offline learning from observations with partial reward labels."""

__version__ = "0.1.0"
