"""Omni-supervised anchor-free detection with inter-guided label assignment."""

__version__ = "0.1.0"
