"""Input validation shared by the estimators and the CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ContractError, InvalidShapeError


def check_images(X, side=None, dtype=np.float32):
    """Return ``X`` as a contiguous ``(N, 3, side, side)`` array with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 4 or X.shape[1] != 3:
        raise InvalidShapeError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if side is not None and X.shape[2:] != (side, side):
        raise InvalidShapeError(f"expected {side}x{side} images, got {X.shape[2]}x{X.shape[3]}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ContractError("pixel values must lie in [0, 1]")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise InvalidShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
    y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return y
