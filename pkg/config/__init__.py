"""Configuration package for the empathy fusion engine."""
