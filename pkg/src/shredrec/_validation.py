"""Input checks shared by the estimators and the plain functions."""

from __future__ import annotations

import numpy as np


def check_gray_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() > 255:
            raise ValueError(f"grayscale pixels must be 8-bit integers, got {img.dtype}")
        img = img.astype(np.uint8)
    return img


def check_binary_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D binary image, got shape {img.shape}")
    if img.dtype != bool:
        if not np.isin(img, (0, 1)).all():
            raise ValueError("binary image must contain only 0/1 or booleans")
        img = img.astype(bool)
    return img


def check_pairs(X, y=None, s_y: int | None = None, s_x: int | None = None):
    """Validate a stack of sample pairs ``X`` of shape ``(N, 2, s_y, s_x)``.

    Channel 0 is the r-sample (right edge of the left shred), channel 1 the
    l-sample.  Labels, when given, must be 0/1 and match ``N``.
    """
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"pairs must have shape (N, 2, s_y, s_x), got {X.shape}")
    if s_y is not None and X.shape[2:] != (s_y, s_x):
        raise ValueError(f"pairs must be {s_y}x{s_x}, got {X.shape[2:]}")
    if X.dtype != bool:
        if not np.isin(X, (0, 1)).all():
            raise ValueError("pair pixels must be binary")
        X = X.astype(bool)
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} pairs")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return X, y.astype(np.uint8)


def check_square_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValueError(f"expected an n x n matrix with n >= 2, got {m.shape}")
    return m


def check_permutation(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {order.tolist()}")
    return order
