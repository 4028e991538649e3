"""Cooperative masked point-cloud pretraining for multi-agent LiDAR perception."""
__version__ = "0.1.0"
