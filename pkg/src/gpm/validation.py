"""Input validation helpers shared by the library and the estimator API."""

from __future__ import annotations

import numpy as np


def as_cloud(x, name: str = "cloud") -> np.ndarray:
    """Validate and return one point cloud as a float64 (N, 3) array."""
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def as_cloud_list(X, name: str = "X") -> list[np.ndarray]:
    """Validate a batch of clouds: a (B, N, 3) array or a sequence of (N, 3)."""
    if isinstance(X, (list, tuple)):  # may be ragged; validate piecewise
        return [as_cloud(c, f"{name}[{i}]") for i, c in enumerate(X)]
    arr = np.asarray(X)
    if arr.ndim == 3:
        return [as_cloud(arr[i], f"{name}[{i}]") for i in range(arr.shape[0])]
    if arr.ndim == 2:
        return [as_cloud(arr, name)]
    raise ValueError(f"{name} must be a (B, N, 3) array or a sequence of (N, 3) clouds")


def as_labels(y, n: int, name: str = "y") -> np.ndarray:
    """Validate integer class labels aligned with n samples."""
    labels = np.asarray(y)
    if labels.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == labels.astype(np.int64)):
            raise ValueError(f"{name} must hold integer class labels")
    return labels.astype(np.int64)


def check_positive(value, name: str):
    if value is None or value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
