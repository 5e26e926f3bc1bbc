"""Localize a phone-carrying person in video by matching IMU windows against
per-person motion features in a learned joint embedding space."""

__version__ = "0.1.0"
