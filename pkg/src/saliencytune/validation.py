"""Input validation helpers used at the public API boundaries."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InputError


def check_in_range(name: str, value: float, lo: float, hi: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value < lo or value > hi:
        raise InputError(f"{name} must be in [{lo}, {hi}], got {value!r}")
    return value


def as_image_array(
    image, expected_shape: tuple[int, int, int] | None = None, name: str = "image"
) -> np.ndarray:
    """Coerce to a float H x W x C array, optionally checking the shape.

    Grayscale H x W input is promoted to H x W x 1.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InputError(f"{name} must be H x W x C, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise InputError(
            f"{name} shape {arr.shape} does not match expected {tuple(expected_shape)}"
        )
    return arr


def as_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Coerce to a 2-D uint8 array with entries in {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise InputError(f"{name} entries must be 0 or 1, found {vals[:8]}")
    return arr.astype(np.uint8)


def as_one_hot(label, num_classes: int) -> np.ndarray:
    """Accept a class index or a one-hot vector; return the one-hot vector."""
    if np.isscalar(label) or (isinstance(label, np.ndarray) and label.ndim == 0):
        idx = int(label)
        if not 0 <= idx < num_classes:
            raise InputError(f"class index {idx} out of range [0, {num_classes})")
        vec = np.zeros(num_classes, dtype=np.float64)
        vec[idx] = 1.0
        return vec
    vec = np.asarray(label, dtype=np.float64)
    if vec.shape != (num_classes,):
        raise InputError(f"one-hot label must have shape ({num_classes},), got {vec.shape}")
    if not (np.isin(vec, (0.0, 1.0)).all() and vec.sum() == 1.0):
        raise InputError("label vector is not one-hot")
    return vec


def check_probabilities(probs, num_classes: int | None = None, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if num_classes is not None and p.shape != (num_classes,):
        raise InputError(f"probability vector must have length {num_classes}, got {p.shape}")
    if (p < -tol).any() or abs(p.sum() - 1.0) > tol:
        raise InputError("probabilities must be nonnegative and sum to 1")
    return p


def check_class_list(classes: Sequence[str]) -> tuple[str, ...]:
    classes = tuple(str(c) for c in classes)
    if len(classes) < 2:
        raise InputError("need at least two classes")
    if len(set(classes)) != len(classes):
        raise InputError("class names must be unique")
    return classes
