"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def as_patch_array(X, name: str = "X") -> np.ndarray:
    """Coerce patches to float32 (n, 1, h, w) in [0, 1].

    Accepts (n, h, w) or (n, 1, h, w); uint8 inputs are scaled by 1/255.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4 or X.shape[1] != 1:
        raise DimensionError(
            f"{name} must be (n, h, w) or (n, 1, h, w) single-channel patches, got shape {X.shape}"
        )
    if X.dtype == np.uint8:
        return X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise DimensionError(f"{name} contains non-finite values")
    return X


def as_paired_patches(X, y):
    """Validate an aligned (degraded, original) patch pair."""
    X = as_patch_array(X, "X")
    y = as_patch_array(y, "y")
    if X.shape != y.shape:
        raise DimensionError(f"X and y must align: {X.shape} vs {y.shape}")
    return X, y


def as_image_batch(X) -> np.ndarray:
    """Coerce to a uint8 (n, h, w) image batch; single images get a batch
    axis."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 1:
        if X.ndim != 3:
            raise DimensionError(f"expected (h, w) or (n, h, w) images, got shape {X.shape}")
    else:
        X = X[:, 0]
    if X.dtype != np.uint8:
        X = np.clip(np.rint(X.astype(np.float64)), 0, 255).astype(np.uint8)
    return X
