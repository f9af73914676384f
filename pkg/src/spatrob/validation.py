"""Input validation helpers shared across the package."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["as_image", "as_image_batch", "check_finite_scalar", "check_label"]


def check_finite_scalar(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def as_image(image) -> np.ndarray:
    """Validate a single image and return it as a (channels, h, w) array.

    A 2-d array is promoted to one channel. Values must be finite and the
    image non-empty. The dtype is preserved.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError(f"image must be (h, w) or (c, h, w), got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("image must be non-empty")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("image values must be finite (no NaN/Inf)")
    return arr


def as_image_batch(images) -> np.ndarray:
    """Validate a batch and return it as (n, channels, h, w)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4:
        raise ValueError(
            f"image batch must be (n, h, w) or (n, c, h, w), got shape {arr.shape}"
        )
    if arr.size == 0:
        raise ValueError("image batch must be non-empty")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("image values must be finite (no NaN/Inf)")
    return arr


def check_label(label, num_classes: int) -> int:
    label = int(label)
    if not 0 <= label < num_classes:
        raise ValueError(f"label must be in [0, {num_classes}), got {label}")
    return label
