"""Input checks shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_contours(Y, min_samples: int = 1, vertex_count: int | None = None) -> np.ndarray:
    """Validate a stack of interleaved contours, shape (N, 2V)."""
    Y = check_array(Y, dtype=np.float64, ensure_min_samples=min_samples, ensure_all_finite=True)
    if Y.shape[1] % 2:
        raise ValueError(f"contour vectors must have even length, got {Y.shape[1]}")
    if vertex_count is not None and Y.shape[1] != 2 * vertex_count:
        raise ValueError(f"expected {vertex_count} vertices, got {Y.shape[1] // 2}")
    return Y


def check_latent(z, n_components: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] != n_components:
        raise ValueError(f"latent code must have last dimension {n_components}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent code contains non-finite entries")
    return z


def check_shift(shift, ndim: int) -> np.ndarray:
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape[-1:] != (2,) or shift.ndim > ndim:
        raise ValueError(f"shift must be a 2-vector (or one per contour), got shape {shift.shape}")
    return shift


def check_images(X) -> np.ndarray:
    """Validate a grayscale image stack, shape (N, H, W); a single (H, W) image is promoted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"images must have shape (N, H, W), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("at least one image is required")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite pixels")
    return X


def standardize_images(X) -> np.ndarray:
    """Per-image zero mean, unit variance (constant images map to zeros)."""
    X = check_images(X)
    mu = X.mean(axis=(1, 2), keepdims=True)
    sd = X.std(axis=(1, 2), keepdims=True)
    return (X - mu) / np.where(sd > 0, sd, 1.0)
