"""Shipped default calibrations and model weights (synthetic, non-clinical)."""
