"""Incremental 3D semantic scene graphs with expectation-biased classification."""

__version__ = "0.1.0"
