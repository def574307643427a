"""Potential-game decision making for multi-vehicle driving."""
