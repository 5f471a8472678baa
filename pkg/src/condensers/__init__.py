"""Discrete constrained Gauss variational problems on generalized condensers."""
from __future__ import annotations

__version__ = "0.1.0"
