"""Exact quantised optimal transport between Lebesgue measure and point processes."""
from __future__ import annotations

__version__ = "0.1.0"
