"""Perturbation-based explanations with perturbation-aware recalibration."""

__version__ = "0.1.0"
