"""Fisheye BEV parking perception: cross-view transformer, polygon detection, synthetic data."""
