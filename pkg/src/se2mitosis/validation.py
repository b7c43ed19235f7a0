"""Input validation for the estimator API."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .io import DataError


def check_uint8(arr, name: str) -> np.ndarray:
    """Accept uint8 data, or integral values in [0, 255] of any numeric dtype."""
    a = np.asarray(arr)
    if a.dtype == np.uint8:
        return a
    if a.dtype.kind not in "iuf":
        raise DataError(f"{name} must be numeric, got dtype {a.dtype}")
    if a.size and (not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 255 or np.any(a != np.round(a))):
        raise DataError(f"{name} must hold 8-bit intensities (integers in [0, 255])")
    return a.astype(np.uint8)


def check_patches(X, min_size: int = 77, name: str = "X") -> np.ndarray:
    """``N x 3 x S x S`` uint8 with ``S >= min_size``; ``N x S x S x 3`` is transposed."""
    a = np.asarray(X)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise DataError(f"{name} must be N x 3 x S x S, got shape {a.shape}")
    if a.shape[1] != 3 and a.shape[3] == 3:
        a = a.transpose(0, 3, 1, 2)
    if a.shape[1] != 3 or a.shape[2] != a.shape[3]:
        raise DataError(f"{name} must be N x 3 x S x S, got shape {a.shape}")
    if a.shape[2] < min_size:
        raise DataError(f"{name} patches are {a.shape[2]}px, need at least {min_size}px")
    if a.shape[0] == 0:
        raise DataError(f"{name} is empty")
    return np.ascontiguousarray(check_uint8(a, name))


def check_binary_labels(y, n: int) -> np.ndarray:
    a = np.asarray(y).reshape(-1)
    if len(a) != n:
        raise DataError(f"got {len(a)} labels for {n} samples")
    if not np.all(np.isin(a, (0, 1))):
        raise DataError("labels must be 0 (non-mitosis) or 1 (mitosis)")
    return a.astype(np.int64)


def check_image(img, min_size: int = 77, name: str = "image") -> np.ndarray:
    """``H x W x 3`` uint8 with both sides at least ``min_size``."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DataError(f"{name} must be H x W x 3, got shape {a.shape}")
    if min(a.shape[:2]) < min_size:
        raise DataError(f"{name} is {a.shape[1]}x{a.shape[0]}, smaller than the {min_size}px patch")
    return check_uint8(a, name)


def check_images(images) -> dict:
    """Mapping ``id -> H x W x 3``; a bare sequence gets ids ``"0", "1", ...``."""
    if not isinstance(images, Mapping):
        images = {str(i): img for i, img in enumerate(images)}
    if not images:
        raise DataError("no images given")
    return {str(k): check_image(v, name=f"image {k!r}") for k, v in images.items()}


def check_points(points, image_ids) -> dict:
    """Mapping ``id -> K x 2`` of ``(x, y)``; missing ids mean no ground truth."""
    out = {}
    for k in image_ids:
        pts = np.asarray(points.get(k, np.zeros((0, 2))), dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError(f"points for image {k!r} must be K x 2, got {pts.shape}")
        out[k] = pts
    return out
