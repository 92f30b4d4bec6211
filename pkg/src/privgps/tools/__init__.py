"""Analyst and evaluation tools: aggregation, load generation, simulation."""
