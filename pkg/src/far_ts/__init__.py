"""Factorized autoregressive time-series generation."""
