"""Bundled TOML experiment configurations for pyoodbench."""
