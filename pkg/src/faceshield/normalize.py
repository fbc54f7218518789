# src/faceshield/normalize.py
"""
Normalization of averaged importance maps.

All functions take one layer's map (any shape) and return an array of the same shape.

Key methods:
- max_abs: divide by the largest absolute entry -> values in [-1, 1].
- l2: divide by the Frobenius norm.
- none: leave the averaged map as is.

Layers whose averaged gradient is identically below ZERO_GUARD come back as all zeros
from every method, so no NaN/Inf can leave this module.

Use `normalize_map(values, method=...)` as the main entry point.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

ZERO_GUARD = 1e-12


def _is_null(values: np.ndarray) -> bool:
    return values.size == 0 or float(np.abs(values).max()) < ZERO_GUARD


def max_abs(values: np.ndarray) -> np.ndarray:
    """
    Scale to unit max-absolute value.

    Idempotent on an already-normalized map up to floating-point rounding.
    """
    values = np.asarray(values, dtype=np.float64)
    if _is_null(values):
        return np.zeros_like(values)
    return values / np.abs(values).max()


def l2(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if _is_null(values):
        return np.zeros_like(values)
    return values / np.sqrt(np.sum(values * values))


def identity(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if _is_null(values):
        return np.zeros_like(values)
    return values.copy()


MapNormalization = Literal["max_abs", "l2", "none"]


def normalize_map(values: np.ndarray, method: MapNormalization = "max_abs") -> np.ndarray:
    """
    Generic entry point.

    Parameters
    ----------
    values : np.ndarray
        Averaged (pre-normalization) map of one layer.
    method : str
        One of "max_abs", "l2", "none".
    """
    method = method.lower()

    if method == "max_abs":
        return max_abs(values)
    elif method == "l2":
        return l2(values)
    elif method == "none":
        return identity(values)
    else:
        raise ValueError(f"Unknown map normalization method: {method}")
