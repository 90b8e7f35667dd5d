"""Shared input checks for images, masks, and boxes."""

from __future__ import annotations

import numpy as np

FILL_VALUE = 0.5


def ensure_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    """Check that ``arr`` is an HxWx3 float image with values in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape HxWx3, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name} must be a float array, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def ensure_binary_mask(arr: np.ndarray, name: str = "mask") -> np.ndarray:
    """Check that ``arr`` is an HxW array containing only 0 and 1."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape HxW, got {arr.shape}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr


def ensure_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
