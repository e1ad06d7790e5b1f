"""Bundled run configs."""
