"""Input validation helpers shared across the package.

All user-facing entry points funnel raw arrays through these checks so that
shape/dtype/range mistakes fail early with a readable message instead of a
cryptic broadcast error deep inside a training step.
"""

from __future__ import annotations

import numpy as np

# Sentinel for "do not score / do not train on this pixel" in label maps.
# Matches the 8-bit convention used by common segmentation benchmarks.
IGNORE_LABEL = 255

# Label maps smaller than this are below the minimum supported raster size.
MIN_IMAGE_SIZE = 32


class ValidationError(ValueError):
    """Raised when user-supplied data or configuration is invalid."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def as_image_batch(images, name: str = "images") -> np.ndarray:
    """Coerce to a float32 batch of shape (N, H, W, 3) with values in [0, 1].

    Accepts a single (H, W, 3) image or a batch. Raises ValidationError on
    wrong rank, non-finite values, or values outside [0, 1].
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    require(arr.ndim == 4 and arr.shape[-1] == 3,
            f"{name}: expected (N, H, W, 3) or (H, W, 3), got shape {arr.shape}")
    require(arr.shape[1] >= MIN_IMAGE_SIZE and arr.shape[2] >= MIN_IMAGE_SIZE,
            f"{name}: rasters must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, "
            f"got {arr.shape[1]}x{arr.shape[2]}")
    require(bool(np.isfinite(arr).all()), f"{name}: contains non-finite values")
    require(float(arr.min()) >= 0.0 and float(arr.max()) <= 1.0,
            f"{name}: values must lie in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def as_label_batch(labels, class_count: int, name: str = "labels") -> np.ndarray:
    """Coerce to an integer label batch of shape (N, H, W).

    Every value must be a class id in [0, class_count) or IGNORE_LABEL.
    """
    arr = np.asarray(labels)
    require(np.issubdtype(arr.dtype, np.integer),
            f"{name}: expected an integer dtype, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    require(arr.ndim == 3, f"{name}: expected (N, H, W) or (H, W), got shape {arr.shape}")
    values = arr[arr != IGNORE_LABEL]
    if values.size:
        require(int(values.min()) >= 0 and int(values.max()) < class_count,
                f"{name}: class ids must lie in [0, {class_count}) or be "
                f"{IGNORE_LABEL} (ignore), got range [{values.min()}, {values.max()}]")
    return arr.astype(np.int64, copy=False)


def check_paired(images: np.ndarray, labels: np.ndarray,
                 name: str = "images/labels") -> None:
    require(images.shape[0] == labels.shape[0] and images.shape[1:3] == labels.shape[1:3],
            f"{name}: image batch {images.shape} does not match label batch {labels.shape}")


def check_same_shape(a, b, name: str = "arrays") -> None:
    require(tuple(np.shape(a)) == tuple(np.shape(b)),
            f"{name}: shape mismatch {np.shape(a)} vs {np.shape(b)}")
