"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class ConfigurationError(ValueError):
    """Raised for invalid hyperparameters or infeasible requests."""


def check_image(img, name="image"):
    """Return ``img`` as a 2-D float64 array with values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_image_batch(X, name="X", size=None):
    """Validate a stack of grayscale images, returning an (n, H, W) float64 array.

    Accepts (H, W), (n, H, W) or (n, 1, H, W).
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4:
        if arr.shape[1] != 1:
            raise DimensionError(f"{name} must have a single channel, got {arr.shape[1]}")
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be (n, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if size is not None and arr.shape[1:] != (size, size):
        raise DimensionError(f"{name} images must be {size}x{size}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_pair_batch(Y, n, name="Y"):
    """Validate bona fide targets shaped (n, 2, H, W)."""
    arr = np.asarray(Y, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise DimensionError(f"{name} must be (n, 2, H, W), got shape {arr.shape}")
    if arr.shape[0] != n:
        raise DimensionError(f"{name} has {arr.shape[0]} rows, expected {n}")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise DimensionError(f"shape mismatch between {label}: {shapes}")


def check_step(t, T, low=1):
    if not isinstance(t, numbers.Integral):
        raise TypeError(f"step index must be an integer, got {type(t).__name__}")
    if not low <= t <= T:
        raise IndexError(f"step {t} outside [{low}, {T}]")
    return int(t)
