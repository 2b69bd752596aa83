"""Nighttime temperature and sleep: ingestion, weather linkage, fixed-effects
panel estimation and climate projection of annual sleep loss."""

__version__ = "0.1.0"
