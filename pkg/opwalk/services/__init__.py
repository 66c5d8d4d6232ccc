"""Simulation and verification services."""
