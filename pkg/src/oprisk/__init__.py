"""Off-policy estimation of return distributions and risk in tabular MDPs."""
from __future__ import annotations

__version__ = "0.1.0"
