"""Small argument checks shared across modules."""

import numbers

import numpy as np


def check_positive(value, name, strict=True):
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    if strict and np.any(np.asarray(value) <= 0):
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and np.any(np.asarray(value) < 0):
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return value


def check_int_range(value, name, lo, hi):
    """Accept integral values in ``[lo, hi]``; bools are rejected."""
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if not lo <= value <= hi:
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {value}")
    return int(value)


def check_strictly_monotone(x, name="x"):
    """Return +1 for increasing, -1 for decreasing; raise otherwise."""
    d = np.diff(np.asarray(x, dtype=float))
    if d.size == 0 or np.all(d > 0):
        return 1
    if np.all(d < 0):
        return -1
    raise ValueError(f"{name} must be strictly monotone")
