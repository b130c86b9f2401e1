"""Small argument checks shared across the package."""

import math

import numpy as np


def check_positive(value, name):
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_index(k):
    if isinstance(k, bool) or int(k) != k or k < 0:
        raise ValueError(f"diffusion index must be a non-negative integer, got {k!r}")
    return int(k)


def as_state(x, dim, name="x"):
    """Return ``x`` as a float vector of length ``dim``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have length {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def leading_zeros(z):
    """Index of the first nonzero coordinate of ``z``."""
    nz = np.flatnonzero(np.asarray(z) != 0)
    if nz.size == 0:
        raise ValueError("discrepancy vector is zero")
    return int(nz[0])
