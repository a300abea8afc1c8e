"""Input validation helpers shared by the estimator layer."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ContractViolation


def check_array(x, name: str = "X", ensure_2d: bool = True) -> np.ndarray:
    """Coerce to a finite float64 array, rejecting NaN/inf and ragged input."""
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise ContractViolation(f"{name} is not numeric: {err}") from err
    if ensure_2d:
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ContractViolation(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractViolation(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains NaN or infinite values")
    return arr


def check_consistent_rows(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[0] != y.shape[0]:
        raise ContractViolation(
            f"X and y have inconsistent row counts: {x.shape[0]} vs {y.shape[0]}"
        )


def check_random_state(seed) -> int:
    """Normalize a seed argument to a plain integer."""
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral):
        return int(seed)
    raise ContractViolation(f"random_state must be an int or None, got {seed!r}")
