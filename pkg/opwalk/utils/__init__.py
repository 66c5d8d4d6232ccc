"""Helper tokens and utilities."""
