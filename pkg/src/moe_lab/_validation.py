"""Input checks shared by the estimator API."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Coerce X to an N x 1 x H x W float64 array with pixels in [0, 1].

    Accepts N x H x W, N x 1 x H x W, or flat N x D rows where D is a
    perfect square (or matches ``image_size``).
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        d = X.shape[1]
        if image_size is None:
            side = math.isqrt(d)
            if side * side != d:
                raise ValueError(f"cannot infer a square image from {d} features; pass image_size")
            image_size = (side, side)
        if image_size[0] * image_size[1] != d:
            raise ValueError(f"{d} features do not fit image_size {image_size}")
        X = X.reshape(len(X), 1, *image_size)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected N x H x W or N x 1 x H x W images, got shape {X.shape}")
    if image_size is not None and tuple(X.shape[2:]) != tuple(image_size):
        raise ValueError(f"images are {X.shape[2:]}, expected {tuple(image_size)}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]; divide raw bytes by 255")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (classes, encoded labels) for a 1-D target vector."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"{n_samples} samples but {len(y)} labels")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, encoded.astype(np.int64)


def check_choice(name: str, value, options) -> None:
    if value not in options:
        raise ValueError(f"{name} must be one of {tuple(options)}, got {value!r}")
