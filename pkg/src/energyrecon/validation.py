"""Input validation helpers shared by the estimators and the modules."""

import numbers

import numpy as np


def as_image(img):
    """Return ``img`` as a float64 ``(C, H, W)`` array; 2D input gets one channel."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected an image of shape (C, H, W) or (H, W), got {arr.shape}")
    return arr


def as_image_list(images):
    """Normalize a single image, a batch array or a sequence into a list of images."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return [as_image(im) for im in images]
    if isinstance(images, np.ndarray):
        return [as_image(images)]
    images = [as_image(im) for im in images]
    if not images:
        raise ValueError("expected at least one image")
    return images


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return arr


def check_fraction(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
