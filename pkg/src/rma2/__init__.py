"""Rapid motor adaptation for a planar manipulator arm."""
