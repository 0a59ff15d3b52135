"""Internal helper for immutable array fields."""

from __future__ import annotations

import numpy as np


def frozen_array(a, dtype=None) -> np.ndarray:
    """Defensive copy marked read-only, so containers truly own their data."""
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.flags.writeable = False
    return out
