"""Cluster-based inference for spatially dependent data with simulation-calibrated level and cluster count."""
__version__ = "0.1.0"
