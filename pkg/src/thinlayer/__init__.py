"""Homogenization and dimension reduction of flow and transport in thin perforated layers."""

__version__ = "0.1.0"
