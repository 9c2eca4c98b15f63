"""Coherent-optical OFDM link simulator with clustering-based nonlinear equalizers."""
