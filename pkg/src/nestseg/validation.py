"""Input checks for image/mask arrays handed to the estimator API."""
from __future__ import annotations

import numpy as np


def check_images(X, channels=None, depth=None, name="X") -> np.ndarray:
    """Return ``X`` as float32 (N, C, H, W).

    Accepts (N, H, W) for single-channel stacks. Values must be finite; if
    ``depth`` is given, H and W must survive ``depth - 1`` halvings.
    """
    arr = np.asarray(X)
    if arr.dtype == object:
        raise ValueError(f"{name} must be a numeric array")
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, C, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"{name} has {arr.shape[1]} channels, expected {channels}")
    if depth is not None:
        step = 2 ** (depth - 1)
        h, w = arr.shape[2:]
        if h % step or w % step:
            raise ValueError(f"{name} spatial size {h}x{w} must be divisible by {step}")
    return arr


def check_masks(y, images: np.ndarray, name="y") -> np.ndarray:
    """Return binary masks as float32 (N, 1, H, W) matching ``images``."""
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, 1, H, W), got {arr.shape}")
    if arr.shape[0] != images.shape[0] or arr.shape[2:] != images.shape[2:]:
        raise ValueError(f"{name} shape {arr.shape} does not match images {images.shape}")
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError(f"{name} must be binary (0/1), found values {uniq[:5]}")
    return arr.astype(np.float32)
