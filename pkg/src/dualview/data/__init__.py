"""Bundled prompt files."""
