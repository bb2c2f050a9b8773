"""Checked-in scenario presets."""
