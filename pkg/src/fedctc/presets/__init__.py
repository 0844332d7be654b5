"""Experiment presets shipped with the package (INI files)."""
